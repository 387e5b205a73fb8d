// Control-transformer core: sequence assembly, masks, passes, freeze sets.
#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "dualmind/model.hpp"

using t64 = dm::tensor<double>;

namespace {

dm::model_config toy_cfg() {
  dm::model_config c;
  c.embed_dim = 4;
  c.decoder_layers = 1;
  c.attention_heads = 1;
  c.context_length = 2;
  c.state_tokens = 1;
  c.action_tokens_max = 1;
  c.xattn_layers = 1;
  c.image_size = 8;
  c.patch_size = 8;
  c.channels = 3;
  c.tl_hidden = 3;
  c.mlp_ratio = 2;
  return c;
}

dm::model_config small_cfg() {
  dm::model_config c;
  c.embed_dim = 16;
  c.decoder_layers = 2;
  c.attention_heads = 2;
  c.context_length = 3;
  c.state_tokens = 2;
  c.action_tokens_max = 2;
  c.xattn_layers = 1;
  c.image_size = 16;
  c.patch_size = 8;
  c.channels = 3;
  c.tl_hidden = 8;
  c.mlp_ratio = 2;
  return c;
}

dm::image noise_image(int size, dm::rng& r) {
  dm::image img = dm::image::make(size, size, 3, 0);
  for (auto& p : img.data) p = std::uint8_t(r.below(256));
  return img;
}

dm::prompt_vocab test_vocab() { return dm::prompt_vocab::from_words({"goal", "red", "blue"}); }

dm::sequence_batch one_row_batch(const dm::model_config& cfg, dm::rng& r, int steps,
                                 bool extra_obs, int action_count) {
  std::vector<dm::image> obs;
  std::vector<std::vector<int>> acts;
  for (int s = 0; s < steps; ++s) {
    obs.push_back(noise_image(cfg.image_size, r));
    std::vector<int> ids;
    for (int a = 0; a < action_count; ++a) ids.push_back(int(r.below(256)));
    acts.push_back(ids);
  }
  if (extra_obs) obs.push_back(noise_image(cfg.image_size, r));
  dm::sequence_batch batch;
  batch.rows.push_back(dm::build_sequence(cfg, "toy", obs, acts, action_count));
  return batch;
}

// ---- plain-loop reimplementation of the decoder for the oracle test ----
using vec = std::vector<double>;

vec naive_layer_norm(const vec& x, const vec& g, const vec& b) {
  const int d = int(x.size());
  double mean = 0, var = 0;
  for (double v : x) mean += v;
  mean /= d;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= d;
  const double istd = var < 1e-12 ? 0.0 : 1.0 / std::sqrt(var + 1e-5);
  vec out(x.size());
  for (int i = 0; i < d; ++i)
    out[std::size_t(i)] = (x[std::size_t(i)] - mean) * istd * g[std::size_t(i)] + b[std::size_t(i)];
  return out;
}
vec naive_affine(const vec& x, const t64& w, const t64& b) {  // x[d_in] -> [d_out]
  const int din = w.dim(0), dout = w.dim(1);
  vec out(std::size_t(dout), 0.0);
  for (int j = 0; j < dout; ++j) {
    double s = b.value()[std::size_t(j)];
    for (int i = 0; i < din; ++i)
      s += x[std::size_t(i)] * w.value()[std::size_t(i * dout + j)];
    out[std::size_t(j)] = s;
  }
  return out;
}
double naive_gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

// Full single-head pre-norm decoder over explicit slot vectors.
std::vector<vec> naive_decoder(const dm::control_model<double>& m, std::vector<vec> x,
                               const std::vector<std::vector<std::uint8_t>>& blocked) {
  const auto& bp = m.blocks[0];
  const int t = int(x.size()), d = m.cfg.embed_dim;
  const double sc = 1.0 / std::sqrt(double(m.cfg.head_dim()));
  std::vector<vec> q(t), k(t), v(t), xn(t);
  vec g1(bp.ln1_g.value()), b1(bp.ln1_b.value());
  for (int i = 0; i < t; ++i) {
    xn[std::size_t(i)] = naive_layer_norm(x[std::size_t(i)], g1, b1);
    q[std::size_t(i)] = naive_affine(xn[std::size_t(i)], bp.attn.wq, bp.attn.bq);
    k[std::size_t(i)] = naive_affine(xn[std::size_t(i)], bp.attn.wk, bp.attn.bk);
    v[std::size_t(i)] = naive_affine(xn[std::size_t(i)], bp.attn.wv, bp.attn.bv);
  }
  for (int i = 0; i < t; ++i) {
    vec logits(std::size_t(t), -1e30);
    double mx = -1e30;
    for (int j = 0; j < t; ++j) {
      if (blocked[std::size_t(i)][std::size_t(j)]) continue;
      double s = 0;
      for (int c = 0; c < d; ++c)
        s += q[std::size_t(i)][std::size_t(c)] * k[std::size_t(j)][std::size_t(c)];
      logits[std::size_t(j)] = s * sc;
      mx = std::max(mx, logits[std::size_t(j)]);
    }
    double z = 0;
    vec p(std::size_t(t), 0.0);
    for (int j = 0; j < t; ++j) {
      p[std::size_t(j)] = std::exp(logits[std::size_t(j)] - mx);
      z += p[std::size_t(j)];
    }
    vec o(std::size_t(d), 0.0);
    for (int j = 0; j < t; ++j)
      for (int c = 0; c < d; ++c)
        o[std::size_t(c)] += p[std::size_t(j)] / z * v[std::size_t(j)][std::size_t(c)];
    vec attn_out = naive_affine(o, bp.attn.wo, bp.attn.bo);
    for (int c = 0; c < d; ++c) x[std::size_t(i)][std::size_t(c)] += attn_out[std::size_t(c)];
  }
  vec g2(bp.ln2_g.value()), b2(bp.ln2_b.value());
  for (int i = 0; i < t; ++i) {
    vec h = naive_affine(naive_layer_norm(x[std::size_t(i)], g2, b2), bp.mw1, bp.mb1);
    for (auto& hv : h) hv = naive_gelu(hv);
    vec out = naive_affine(h, bp.mw2, bp.mb2);
    for (int c = 0; c < d; ++c) x[std::size_t(i)][std::size_t(c)] += out[std::size_t(c)];
  }
  return x;
}

}  // namespace

TEST_CASE("build_sequence: deterministic slot map, capacity check, trailing-action rules") {
  dm::model_config c = small_cfg();
  c.state_tokens = 4;
  c.action_tokens_max = 1;
  c.context_length = 2;
  CHECK(c.seq_slots() == 10);
  CHECK(c.state_slot(0, 0) == 0);
  CHECK(c.state_slot(0, 3) == 3);
  CHECK(c.action_slot(0, 0) == 4);
  CHECK(c.state_slot(1, 0) == 5);
  CHECK(c.action_slot(1, 0) == 9);

  dm::rng r(1);
  std::vector<dm::image> obs = {noise_image(16, r), noise_image(16, r), noise_image(16, r)};
  std::vector<std::vector<int>> acts = {{7}, {9}, {11}};
  CHECK_THROWS_WITH_AS(dm::build_sequence(c, "toy", obs, acts, 1),
                       doctest::Contains("longer than capacity"), std::invalid_argument);

  auto row = dm::build_sequence(c, "toy", {obs[0], obs[1], obs[2]}, {{7}, {9}}, 1);
  CHECK(row.valid_steps() == 2);
  CHECK(row.has_extra_obs);
  CHECK(row.steps[1].action_ids == std::vector<int>{9});

  auto roll = dm::build_sequence(c, "toy", {obs[0], obs[1]}, {{7}, {}}, 1);
  CHECK(roll.steps[1].valid);
  CHECK(roll.steps[1].action_ids.empty());
  CHECK_THROWS_WITH_AS(dm::build_sequence(c, "toy", {obs[0], obs[1]}, {{}, {7}}, 1),
                       doctest::Contains("final step"), std::invalid_argument);
}

TEST_CASE("causal mask blocks exactly j > i; exclusion mask implements the read-slot rule") {
  auto cm = dm::causal_mask_bytes(1, 3);
  const std::uint8_t want[9] = {0, 1, 1, 0, 0, 1, 0, 0, 0};
  for (int i = 0; i < 9; ++i) CHECK((*cm)[std::size_t(i)] == want[i]);

  // K=4, A_max=2, one row, both steps valid with 2 action tokens.
  dm::model_config c = small_cfg();
  c.state_tokens = 4;
  c.action_tokens_max = 2;
  c.context_length = 2;
  dm::rng r(2);
  auto batch = one_row_batch(c, r, 2, false, 2);
  auto em = dm::exclusion_mask_bytes(c, batch, 0);
  const int t = c.seq_slots();  // 12
  auto blocked = [&](int i, int j) { return (*em)[std::size_t(i * t + j)] != 0; };
  // Step-1 state slots are 6..9; step-0 action slots are 4 and 5.
  // thresh(k) = k - (K - A) = k - 2: slot k=0,1,2 see no step-0 action tokens,
  // k=3 sees exactly token 0.
  CHECK(blocked(6, 4));
  CHECK(blocked(6, 5));
  CHECK(blocked(7, 4));
  CHECK(blocked(7, 5));
  CHECK(blocked(8, 4));
  CHECK(blocked(8, 5));
  CHECK_FALSE(blocked(9, 4));
  CHECK(blocked(9, 5));
  // Ordinary causal structure is preserved elsewhere.
  CHECK_FALSE(blocked(9, 0));
  CHECK_FALSE(blocked(9, 8));
  CHECK(blocked(4, 5));
  // Action slots of step 1 are not excluded from anything causal.
  CHECK_FALSE(blocked(10, 4));
  CHECK_FALSE(blocked(10, 5));
}

TEST_CASE("full forward matches a plain-loop reimplementation (causal and exclusion)") {
  auto cfg = toy_cfg();
  auto m = dm::control_model<double>::init(cfg, test_vocab(), 42, 43);
  dm::rng r(3);
  auto batch = one_row_batch(cfg, r, 2, false, 1);
  auto out = dm::phase1_forward(m, batch);
  CHECK(out.t == 4);

  // With S=1 the TokenLearner weight is softmax over one position = 1, so the
  // state token equals the single patch token.
  const auto pcfg = cfg.patch();
  std::vector<vec> x0;
  for (int s = 0; s < 2; ++s) {
    auto patches = dm::patches_from_image<double>(batch.rows[0].steps[std::size_t(s)].obs, pcfg);
    vec px(patches.value());
    vec tok = naive_affine(px, m.patch.w, m.patch.b);
    for (int c = 0; c < 4; ++c) tok[std::size_t(c)] += m.patch.pos.value()[std::size_t(c)];
    // state slot then action slot, each plus the timestep embedding
    vec state = tok, act(4);
    const int id = batch.rows[0].steps[std::size_t(s)].action_ids[0];
    for (int c = 0; c < 4; ++c) {
      state[std::size_t(c)] += m.t_emb.value()[std::size_t(s * 4 + c)];
      act[std::size_t(c)] = m.act_emb.value()[std::size_t(id * 4 + c)] +
                            m.t_emb.value()[std::size_t(s * 4 + c)];
    }
    x0.push_back(state);
    x0.push_back(act);
  }
  auto mask_of = [&](const dm::mask_ptr& mp) {
    std::vector<std::vector<std::uint8_t>> blocked(4, std::vector<std::uint8_t>(4));
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) blocked[std::size_t(i)][std::size_t(j)] = (*mp)[std::size_t(i * 4 + j)];
    return blocked;
  };
  auto want_causal = naive_decoder(m, x0, mask_of(dm::causal_mask_bytes(1, 4)));
  auto want_excl = naive_decoder(m, x0, mask_of(dm::exclusion_mask_bytes(cfg, batch, 0)));
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 4; ++c) {
      CHECK(out.h_causal.value()[std::size_t(i * 4 + c)] ==
            doctest::Approx(want_causal[std::size_t(i)][std::size_t(c)]).epsilon(1e-9));
      CHECK(out.h_exclusion.value()[std::size_t(i * 4 + c)] ==
            doctest::Approx(want_excl[std::size_t(i)][std::size_t(c)]).epsilon(1e-9));
    }
  // The exclusion pass really differs where the rule bites (slot 2 = state of
  // step 1, which may not see slot 1 = action of step 0).
  bool differs = false;
  for (int c = 0; c < 4; ++c)
    differs |= out.h_causal.value()[std::size_t(2 * 4 + c)] !=
               out.h_exclusion.value()[std::size_t(2 * 4 + c)];
  CHECK(differs);
}

TEST_CASE("pooled forward-prediction targets equal the K-mean of state tokens, detached") {
  auto cfg = small_cfg();
  auto m = dm::control_model<double>::init(cfg, test_vocab(), 7, 8);
  dm::rng r(5);
  auto batch = one_row_batch(cfg, r, 2, true, 2);
  auto enc = dm::encode_observations(m, batch);
  REQUIRE(enc.count == 2);
  const int k = cfg.state_tokens, d = cfg.embed_dim;
  for (int g = 0; g < 2; ++g)
    for (int c = 0; c < d; ++c) {
      double mean = 0;
      for (int kk = 0; kk < k; ++kk) mean += enc.z.value()[std::size_t((g * k + kk) * d + c)] / k;
      CHECK(enc.pooled[std::size_t(g)][std::size_t(c)] == doctest::Approx(mean).epsilon(1e-12));
    }
  CHECK(!enc.pooled_extra[0].empty());
}

TEST_CASE("causality: perturbing inputs at slot j leaves hidden states before j unchanged") {
  auto cfg = small_cfg();
  auto m = dm::control_model<double>::init(cfg, test_vocab(), 11, 12);
  dm::rng r(6);
  auto batch = one_row_batch(cfg, r, 3, false, 2);
  auto base = dm::phase1_forward(m, batch);
  const int d = cfg.embed_dim, t = cfg.seq_slots();

  // Perturb the observation of step 2: state slots of step 2 start at slot 8.
  {
    auto batch2 = batch;
    batch2.rows[0].steps[2].obs.at(3, 3, 0) ^= 0x80;
    auto out2 = dm::phase1_forward(m, batch2);
    const int first = cfg.state_slot(2, 0);
    for (int i = 0; i < first; ++i)
      for (int c = 0; c < d; ++c)
        CHECK(out2.h_causal.value()[std::size_t(i * d + c)] ==
              base.h_causal.value()[std::size_t(i * d + c)]);
    bool changed = false;
    for (int i = first; i < t; ++i)
      for (int c = 0; c < d; ++c)
        changed |= out2.h_causal.value()[std::size_t(i * d + c)] !=
                   base.h_causal.value()[std::size_t(i * d + c)];
    CHECK(changed);
  }
  // Perturb the second action token of step 1 (slot index 7).
  {
    auto batch2 = batch;
    batch2.rows[0].steps[1].action_ids[1] ^= 1;
    auto out2 = dm::phase1_forward(m, batch2);
    const int j = cfg.action_slot(1, 1);
    for (int i = 0; i < j; ++i)
      for (int c = 0; c < d; ++c)
        CHECK(out2.h_causal.value()[std::size_t(i * d + c)] ==
              base.h_causal.value()[std::size_t(i * d + c)]);
  }
}

TEST_CASE("cross-attention with one prompt token is constant across queries pre-residual") {
  auto cfg = small_cfg();
  auto m = dm::control_model<double>::init(cfg, test_vocab(), 21, 22);
  dm::rng r(9);
  auto batch = one_row_batch(cfg, r, 2, false, 2);
  batch.rows[0].has_prompt = true;
  batch.rows[0].prompt.kind = dm::prompt_kind::object_id;
  batch.rows[0].prompt.object = 1;
  const int t = cfg.seq_slots(), d = cfg.embed_dim;
  auto pc = dm::encode_prompts(m, batch, t);
  CHECK(pc.pmax == 1);
  auto x = dm::gaussian_tensor<double>({t, d}, 1.0, r, false);
  dm::forward_opts<double> opts;
  auto out = dm::detail::cross_attention(m, m.xblocks[0], x, 1, t, pc, opts, false);
  for (int i = 1; i < t; ++i)
    for (int c = 0; c < d; ++c)
      CHECK(out.value()[std::size_t(i * d + c)] ==
            doctest::Approx(out.value()[std::size_t(c)]).epsilon(1e-12));
}

TEST_CASE("policy pass shapes are prompt-length invariant; prefix mode extends the sequence") {
  auto cfg = small_cfg();
  auto vocab = dm::prompt_vocab::from_words({"go", "to", "red", "blue", "target"});
  auto m = dm::control_model<double>::init(cfg, vocab, 31, 32);
  dm::rng r(10);
  auto batch = one_row_batch(cfg, r, 2, false, 2);
  batch.rows[0].has_prompt = true;
  batch.rows[0].prompt.kind = dm::prompt_kind::language;
  batch.rows[0].prompt.text = "go to red target";
  auto out4 = dm::policy_forward(m, batch);
  batch.rows[0].prompt.text = "red";
  auto out1 = dm::policy_forward(m, batch);
  CHECK(out4.h.shape() == out1.h.shape());
  CHECK(out4.prefix == 0);

  dm::forward_opts<double> opts;
  opts.prefix_prompt = true;
  batch.rows[0].prompt.text = "go to red target";
  auto pre = dm::policy_forward(m, batch, opts);
  CHECK(pre.prefix == 4);
  CHECK(pre.t == 4 + cfg.seq_slots());
  CHECK(pre.h.dim(0) == pre.t);

  dm::sequence_batch nop = one_row_batch(cfg, r, 2, false, 2);
  CHECK_THROWS_WITH_AS(dm::policy_forward(m, nop), doctest::Contains("no prompt"),
                       std::invalid_argument);
}

TEST_CASE("phase-1 passes never touch cross-attention or policy parameters") {
  auto cfg = small_cfg();
  auto m = dm::control_model<double>::init(cfg, test_vocab(), 41, 42);
  dm::rng r(12);
  auto batch = one_row_batch(cfg, r, 3, true, 2);
  dm::tape<double> tp;
  {
    dm::tape_scope<double> sc(tp);
    auto out = dm::phase1_forward(m, batch);
    tp.backward_from(dm::sum_all(dm::add(out.h_causal, out.h_exclusion)));
  }
  CHECK(m.blocks[0].attn.wq.has_grad());
  CHECK(m.patch.w.has_grad());
  for (auto& xb : m.xblocks) {
    CHECK_FALSE(xb.at.wq.has_grad());
    CHECK_FALSE(xb.at.wo.has_grad());
  }
  CHECK_FALSE(m.piw.has_grad());
  CHECK_FALSE(m.prompt_enc.proj_w.has_grad());
}

TEST_CASE("freeze partition: strict ordering, mode 4 trains all, mode 2 needs 5 layers") {
  auto cfg = small_cfg();
  cfg.decoder_layers = 5;
  cfg.xattn_layers = 2;
  auto m = dm::control_model<double>::init(cfg, test_vocab(), 51, 52);
  auto params = m.named_params();
  auto count_of = [&](const dm::partition_result& p) {
    std::int64_t n = 0;
    std::set<std::string> train(p.trainable.begin(), p.trainable.end());
    for (auto& [name, t] : params)
      if (train.count(name)) n += t.numel();
    return n;
  };
  auto p1 = dm::param_partition(m, dm::freeze_mode::xattn_only);
  auto p2 = dm::param_partition(m, dm::freeze_mode::late_decoder);
  auto p3 = dm::param_partition(m, dm::freeze_mode::except_encoder);
  auto p4 = dm::param_partition(m, dm::freeze_mode::full);
  CHECK(count_of(p1) > 0);
  CHECK(count_of(p1) < count_of(p2));
  CHECK(count_of(p2) < count_of(p3));
  CHECK(count_of(p3) < count_of(p4));
  CHECK(p4.frozen.empty());
  CHECK(p1.trainable.size() + p1.frozen.size() == params.size());
  // Set inclusion along the chain.
  std::set<std::string> s1(p1.trainable.begin(), p1.trainable.end());
  std::set<std::string> s2(p2.trainable.begin(), p2.trainable.end());
  std::set<std::string> s3(p3.trainable.begin(), p3.trainable.end());
  for (auto& n : s1) CHECK(s2.count(n) == 1);
  for (auto& n : s2) CHECK(s3.count(n) == 1);
  // Mode 3 freezes exactly the encoder.
  for (auto& n : p3.frozen) CHECK(n.rfind("encoder.", 0) == 0);

  auto small = dm::control_model<double>::init(small_cfg(), test_vocab(), 1, 2);
  CHECK_THROWS_WITH_AS(dm::param_partition(small, dm::freeze_mode::late_decoder),
                       doctest::Contains("5 decoder layers"), std::invalid_argument);
}

TEST_CASE("loss index plan: padded and invalid slots never appear in any index set") {
  dm::model_config cfg = small_cfg();  // K=2, A_max=2, L=3
  dm::rng r(14);
  // Row 0: domain with action_count=1 (one PAD slot per step), 2 valid steps,
  // extra observation present. Row 1: action_count=2, 3 valid steps, rollout
  // row whose final step has no action ids yet.
  dm::sequence_batch batch;
  {
    std::vector<dm::image> obs = {noise_image(16, r), noise_image(16, r), noise_image(16, r)};
    batch.rows.push_back(dm::build_sequence(cfg, "nav", obs, {{3}, {250}}, 1));
  }
  {
    std::vector<dm::image> obs = {noise_image(16, r), noise_image(16, r), noise_image(16, r)};
    batch.rows.push_back(dm::build_sequence(cfg, "reach", obs, {{1, 2}, {3, 4}, {}}, 2));
  }
  batch.has_mask = true;
  batch.mask.ratio = 1.0;
  batch.mask.masked = {{1, 0, 1, 0, 0, 0}, {1, 1, 1, 1, 0, 0}};  // all valid action slots
  auto m = dm::control_model<double>::init(cfg, test_vocab(), 61, 62);
  auto enc = dm::encode_observations(m, batch);
  auto plan = dm::build_index_plan(cfg, batch, enc.g_of, 0);

  const int t = cfg.seq_slots();
  // Row 0 valid action-token flat positions: action_slot(s, 0) for s in {0,1}.
  std::set<int> valid_act = {0 * t + cfg.action_slot(0, 0), 0 * t + cfg.action_slot(1, 0)};
  for (int s = 0; s < 2; ++s)
    for (int a = 0; a < 2; ++a) valid_act.insert(1 * t + cfg.action_slot(s, a));
  for (int p : plan.l3_pos) CHECK(valid_act.count(p) == 1);
  CHECK(plan.l3_pos.size() == 6);  // 2 + 4 masked tokens with ids

  // L1: row 0 steps {0 (next valid), 1 (extra obs)}; row 1 steps {0, 1} (step 2
  // has no ids so its own L1 entry is skipped, but step 1 still targets step 2's
  // observation).
  CHECK(plan.l1_pos.size() == 4);
  CHECK(plan.l1_target[1][0] == 1);  // extra-obs target for row 0 step 1
  // L2: row 0 step 0 (1 token) + row 1 steps 0,1 (2 tokens each).
  CHECK(plan.l2_ids.size() == 5);
  // Policy tokens: row 0: 2 steps x 1; row 1: 2 steps x 2 (rollout step excluded).
  CHECK(plan.pi_ids.size() == 6);
  // Read positions of pi for a_0 sit at the last state slot of the same step.
  CHECK(plan.pi_pos[0] == 0 * t + cfg.state_slot(0, 1));
  // Read positions of L2 for row 1 step 0 are the two state slots of step 1.
  CHECK(plan.l2_pos[1] == 1 * t + cfg.state_slot(1, 0));
  CHECK(plan.l2_pos[2] == 1 * t + cfg.state_slot(1, 1));
  // No position may touch a PAD action slot of row 0 (slot index action_slot(s,1)).
  std::set<int> pad_slots = {0 * t + cfg.action_slot(0, 1), 0 * t + cfg.action_slot(1, 1),
                             0 * t + cfg.action_slot(2, 1)};
  auto check_none = [&](const std::vector<int>& ps) {
    for (int p : ps) CHECK(pad_slots.count(p) == 0);
  };
  check_none(plan.l1_pos);
  check_none(plan.l2_pos);
  check_none(plan.l3_pos);
  check_none(plan.pi_pos);
}

TEST_CASE("leak switch reuses the causal pass for the inverse readout") {
  auto cfg = toy_cfg();
  auto m = dm::control_model<double>::init(cfg, test_vocab(), 71, 72);
  dm::rng r(15);
  auto batch = one_row_batch(cfg, r, 2, false, 1);
  dm::forward_opts<double> opts;
  opts.leak_l2 = true;
  auto out = dm::phase1_forward(m, batch, opts);
  CHECK(out.h_exclusion.same_object(out.h_causal));
}
