#pragma once
// Encoder-decoder control transformer over interleaved state/action tokens.
//
// Sequence layout: L timesteps, each [K state slots][A_max action slots].
// The encoder (patch embedding + TokenLearner) turns every observation into
// K state tokens; actions enter through a 258-row embedding table (256 bins
// + MASK + PAD). A pre-norm causal decoder runs in up to three flavors per
// training step, all sharing one encoder evaluation:
//   pass "causal"    - plain causal mask; feeds forward prediction (f1) and
//                      the policy head when prompting is active.
//   pass "exclusion" - causal mask plus per-query exclusions so that the
//                      state slots of step m+1 cannot see the action tokens
//                      of step m at or after the token they are predicting;
//                      feeds the inverse-dynamics head (f2) without leaking
//                      the predicted action while keeping earlier actions
//                      and within-step teacher forcing visible.
//   pass "masked"    - causal mask with MASK embeddings substituted at a
//                      sampled subset of action slots; feeds the masked
//                      inverse head (f3) at exactly those slots.
// Prompt conditioning is either cross-attention (single-head, scaled by
// 1/sqrt(d), one block after each of the last xattn_layers decoder blocks)
// or prefix tokens prepended to the sequence under the causal mask.

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dualmind/checkpoint.hpp"
#include "dualmind/tokenize.hpp"

namespace dm {

// ---------------------------------------------------------------- config ---
struct model_config {
  int embed_dim = 128;
  int decoder_layers = 4;
  int attention_heads = 4;
  int context_length = 6;     // L timesteps
  int state_tokens = 4;       // K per observation
  int action_tokens_max = 2;  // A_max across domains
  double dropout = 0.0;
  int xattn_layers = 4;       // cross-attention blocks, attached to the last decoder blocks
  int image_size = 64;
  int patch_size = 16;
  int channels = 3;
  int tl_hidden = 64;
  int mlp_ratio = 4;

  patch_config patch() const { return {image_size, patch_size, channels, embed_dim}; }
  token_learner_config tl() const {
    return {patch().tokens(), state_tokens, embed_dim, tl_hidden};
  }
  int step_slots() const { return state_tokens + action_tokens_max; }
  int seq_slots() const { return context_length * step_slots(); }
  int head_dim() const { return embed_dim / attention_heads; }
  int state_slot(int step, int k) const { return step * step_slots() + k; }
  int action_slot(int step, int a) const { return step * step_slots() + state_tokens + a; }

  void validate() const {
    check(embed_dim >= 1 && decoder_layers >= 1 && attention_heads >= 1,
          "model_config: dimensions must be positive");
    check(embed_dim % attention_heads == 0,
          "model_config: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
              std::to_string(attention_heads));
    check(context_length >= 1, "model_config: context_length must be >= 1");
    check(state_tokens >= 1 && action_tokens_max >= 1,
          "model_config: token counts must be >= 1");
    check(action_tokens_max <= state_tokens,
          "model_config: action_tokens_max must be <= state_tokens (the inverse head reads "
          "action token a at state slot K-A+a of the next step)");
    check(dropout >= 0.0 && dropout < 1.0, "model_config: dropout must be in [0,1)");
    check(xattn_layers >= 1 && xattn_layers <= decoder_layers,
          "model_config: xattn_layers must be in [1, decoder_layers]");
    check(mlp_ratio >= 1, "model_config: mlp_ratio must be >= 1");
    patch().validate();
    tl().validate();
  }
};

// ------------------------------------------------------------- sequences ---
struct step_record {
  bool valid = false;
  int action_count = 0;         // domain A, <= A_max; 0 = no action yet (rollout)
  std::vector<int> action_ids;  // size action_count, ids in [0,256)
  image obs;
};

struct sequence_row {
  std::string domain;
  std::vector<step_record> steps;  // size L
  bool has_extra_obs = false;
  image extra_obs;  // observation after the last valid step; forward-prediction target only
  bool has_prompt = false;
  task_prompt prompt;

  int valid_steps() const {
    int n = 0;
    for (const auto& s : steps) n += s.valid ? 1 : 0;
    return n;
  }
};

struct mask_pattern {
  double ratio = 0.0;
  std::uint64_t seed = 0;
  // masked[row][step * A_max + a]; may be 1 only where a valid action token sits
  std::vector<std::vector<std::uint8_t>> masked;

  int count() const {
    int n = 0;
    for (const auto& row : masked)
      for (auto b : row) n += b ? 1 : 0;
    return n;
  }
};

struct sequence_batch {
  std::vector<sequence_row> rows;
  bool has_mask = false;
  mask_pattern mask;
};

// Validates and packs one episode window into a sequence row. `observations`
// holds o_t..o_{t+m}; `actions` holds the tokenized actions of the first
// min(m, |actions|) steps. One more observation than actions marks the last
// observation as the forward-prediction target. The final step may carry
// fewer action tokens than action_count (rollout time, tokens decoded so
// far); the undecided slots are fed MASK embeddings.
inline sequence_row build_sequence(const model_config& cfg, const std::string& domain,
                                   const std::vector<image>& observations,
                                   const std::vector<std::vector<int>>& actions,
                                   int action_count) {
  cfg.validate();
  check(action_count >= 1 && action_count <= cfg.action_tokens_max,
        "build_sequence: action_count " + std::to_string(action_count) + " outside [1, " +
            std::to_string(cfg.action_tokens_max) + "]");
  const int l = cfg.context_length;
  const int n_steps = int(actions.size());
  check(n_steps >= 1, "build_sequence: empty window");
  check(n_steps <= l, "build_sequence: window of " + std::to_string(n_steps) +
                          " steps longer than capacity L=" + std::to_string(l));
  check(int(observations.size()) == n_steps || int(observations.size()) == n_steps + 1,
        "build_sequence: want one observation per step plus an optional trailing target, got " +
            std::to_string(observations.size()) + " observations for " + std::to_string(n_steps) +
            " steps");
  sequence_row row;
  row.domain = domain;
  row.steps.resize(std::size_t(l));
  for (int s = 0; s < n_steps; ++s) {
    auto& st = row.steps[std::size_t(s)];
    st.valid = true;
    st.obs = observations[std::size_t(s)];
    const auto& ids = actions[std::size_t(s)];
    check(int(ids.size()) <= action_count,
          "build_sequence: step " + std::to_string(s) + " has " + std::to_string(ids.size()) +
              " action tokens, want at most " + std::to_string(action_count));
    check(int(ids.size()) == action_count || s + 1 == n_steps,
          "build_sequence: only the final step may leave action tokens undecided");
    for (int id : ids)
      check(id >= 0 && id < kActionBins,
            "build_sequence: action id " + std::to_string(id) + " outside [0,256)");
    st.action_count = action_count;
    st.action_ids = ids;
  }
  if (int(observations.size()) == n_steps + 1) {
    row.has_extra_obs = true;
    row.extra_obs = observations.back();
  }
  return row;
}

// ------------------------------------------------------------ parameters ---
template <class S>
struct attn_params {
  tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;

  static attn_params init(int d, rng& r) {
    attn_params p;
    p.wq = gaussian_tensor<S>({d, d}, S(0.02), r);
    p.bq = zero_tensor<S>({d});
    p.wk = gaussian_tensor<S>({d, d}, S(0.02), r);
    p.bk = zero_tensor<S>({d});
    p.wv = gaussian_tensor<S>({d, d}, S(0.02), r);
    p.bv = zero_tensor<S>({d});
    p.wo = gaussian_tensor<S>({d, d}, S(0.02), r);
    p.bo = zero_tensor<S>({d});
    return p;
  }
  template <class F>
  void visit(const std::string& prefix, F&& fn) {
    fn(prefix + ".wq", wq);
    fn(prefix + ".bq", bq);
    fn(prefix + ".wk", wk);
    fn(prefix + ".bk", bk);
    fn(prefix + ".wv", wv);
    fn(prefix + ".bv", bv);
    fn(prefix + ".wo", wo);
    fn(prefix + ".bo", bo);
  }
};

template <class S>
struct block_params {
  tensor<S> ln1_g, ln1_b;
  attn_params<S> attn;
  tensor<S> ln2_g, ln2_b;
  tensor<S> mw1, mb1, mw2, mb2;

  static block_params init(int d, int hidden, rng& r) {
    block_params p;
    p.ln1_g = const_tensor<S>({d}, S(1));
    p.ln1_b = zero_tensor<S>({d});
    p.attn = attn_params<S>::init(d, r);
    p.ln2_g = const_tensor<S>({d}, S(1));
    p.ln2_b = zero_tensor<S>({d});
    p.mw1 = gaussian_tensor<S>({d, hidden}, S(0.02), r);
    p.mb1 = zero_tensor<S>({hidden});
    p.mw2 = gaussian_tensor<S>({hidden, d}, S(0.02), r);
    p.mb2 = zero_tensor<S>({d});
    return p;
  }
  template <class F>
  void visit(const std::string& prefix, F&& fn) {
    fn(prefix + ".ln1.g", ln1_g);
    fn(prefix + ".ln1.b", ln1_b);
    attn.visit(prefix + ".attn", fn);
    fn(prefix + ".ln2.g", ln2_g);
    fn(prefix + ".ln2.b", ln2_b);
    fn(prefix + ".mlp.w1", mw1);
    fn(prefix + ".mlp.b1", mb1);
    fn(prefix + ".mlp.w2", mw2);
    fn(prefix + ".mlp.b2", mb2);
  }
};

template <class S>
struct xattn_params {
  tensor<S> ln_g, ln_b;
  attn_params<S> at;

  static xattn_params init(int d, rng& r) {
    xattn_params p;
    p.ln_g = const_tensor<S>({d}, S(1));
    p.ln_b = zero_tensor<S>({d});
    p.at = attn_params<S>::init(d, r);
    return p;
  }
  template <class F>
  void visit(const std::string& prefix, F&& fn) {
    fn(prefix + ".ln.g", ln_g);
    fn(prefix + ".ln.b", ln_b);
    at.visit(prefix, fn);
  }
};

template <class S>
struct control_model {
  model_config cfg;
  patch_embed_params<S> patch;
  token_learner_params<S> tl;
  tensor<S> act_emb;  // [258, d]
  tensor<S> t_emb;    // [L, d]
  std::vector<block_params<S>> blocks;
  std::vector<xattn_params<S>> xblocks;
  tensor<S> f1w, f1b;  // d -> d
  tensor<S> f2w, f2b;  // d -> 256
  tensor<S> f3w, f3b;  // d -> 256
  tensor<S> piw, pib;  // d -> 256
  prompt_encoder<S> prompt_enc;

  static control_model init(const model_config& cfg, const prompt_vocab& vocab,
                            std::uint64_t seed, std::uint64_t trunk_seed) {
    cfg.validate();
    control_model m;
    m.cfg = cfg;
    seed_splitter split(seed);
    const int d = cfg.embed_dim;
    {
      rng r = split.stream("encoder.patch", 0);
      m.patch = patch_embed_params<S>::init(cfg.patch(), r);
    }
    {
      rng r = split.stream("encoder.tl", 0);
      m.tl = token_learner_params<S>::init(cfg.tl(), r);
    }
    {
      rng r = split.stream("embed", 0);
      m.act_emb = gaussian_tensor<S>({kActionVocab, d}, S(0.02), r);
      m.t_emb = gaussian_tensor<S>({cfg.context_length, d}, S(0.01), r);
    }
    for (int i = 0; i < cfg.decoder_layers; ++i) {
      rng r = split.stream("decoder", std::uint64_t(i));
      m.blocks.push_back(block_params<S>::init(d, d * cfg.mlp_ratio, r));
    }
    for (int i = 0; i < cfg.xattn_layers; ++i) {
      rng r = split.stream("xattn", std::uint64_t(i));
      m.xblocks.push_back(xattn_params<S>::init(d, r));
    }
    {
      rng r = split.stream("heads", 0);
      m.f1w = gaussian_tensor<S>({d, d}, S(0.02), r);
      m.f1b = zero_tensor<S>({d});
      m.f2w = gaussian_tensor<S>({d, kActionBins}, S(0.02), r);
      m.f2b = zero_tensor<S>({kActionBins});
      m.f3w = gaussian_tensor<S>({d, kActionBins}, S(0.02), r);
      m.f3b = zero_tensor<S>({kActionBins});
      m.piw = gaussian_tensor<S>({d, kActionBins}, S(0.02), r);
      m.pib = zero_tensor<S>({kActionBins});
    }
    m.prompt_enc = prompt_encoder<S>::init(cfg.patch(), vocab, trunk_seed);
    return m;
  }

  // Decoder block index that cross-attention block j follows.
  int xattn_anchor(int j) const { return cfg.decoder_layers - cfg.xattn_layers + j; }

  template <class F>
  void visit_params(F&& fn) {
    patch.visit("encoder.patch", fn);
    tl.visit("encoder.tl", fn);
    fn(std::string("embed.action"), act_emb);
    fn(std::string("embed.timestep"), t_emb);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit("decoder." + std::to_string(i), fn);
    for (std::size_t i = 0; i < xblocks.size(); ++i)
      xblocks[i].visit("xattn." + std::to_string(i), fn);
    fn(std::string("head.f1.w"), f1w);
    fn(std::string("head.f1.b"), f1b);
    fn(std::string("head.f2.w"), f2w);
    fn(std::string("head.f2.b"), f2b);
    fn(std::string("head.f3.w"), f3w);
    fn(std::string("head.f3.b"), f3b);
    fn(std::string("head.pi.w"), piw);
    fn(std::string("head.pi.b"), pib);
    prompt_enc.visit_trainable("prompt", fn);
  }

  std::vector<std::pair<std::string, tensor<S>>> named_params() {
    std::vector<std::pair<std::string, tensor<S>>> out;
    visit_params([&](const std::string& n, tensor<S>& t) { out.emplace_back(n, t); });
    return out;
  }
  // All parameters plus the frozen prompt trunk (for checkpoints).
  std::vector<std::pair<std::string, tensor<S>>> named_all() {
    auto out = named_params();
    prompt_enc.visit_frozen("prompt",
                            [&](const std::string& n, tensor<S>& t) { out.emplace_back(n, t); });
    return out;
  }
};

// -------------------------------------------------------- freeze partition ---
enum class freeze_mode : int { xattn_only = 1, late_decoder = 2, except_encoder = 3, full = 4 };

inline freeze_mode freeze_from_int(int m) {
  check(m >= 1 && m <= 4, "freeze mode must be in {1,2,3,4}, got " + std::to_string(m));
  return freeze_mode(m);
}

struct partition_result {
  std::vector<std::string> trainable, frozen;
};

inline bool name_trainable_in_mode(const std::string& name, freeze_mode mode) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  switch (mode) {
    case freeze_mode::xattn_only:
      return starts("xattn.");
    case freeze_mode::late_decoder: {
      if (starts("xattn.") || starts("head.")) return true;
      if (starts("decoder.")) {
        const int idx = std::stoi(name.substr(8));
        return idx >= 4;  // layers 5..N (1-indexed) train; the first 4 stay frozen
      }
      return false;
    }
    case freeze_mode::except_encoder:
      return !starts("encoder.");
    case freeze_mode::full:
      return true;
  }
  return false;
}

template <class S>
partition_result param_partition(control_model<S>& m, freeze_mode mode) {
  check(mode != freeze_mode::late_decoder || m.cfg.decoder_layers >= 5,
        "freeze mode 2 needs >= 5 decoder layers, got " + std::to_string(m.cfg.decoder_layers));
  partition_result out;
  m.visit_params([&](const std::string& n, tensor<S>&) {
    (name_trainable_in_mode(n, mode) ? out.trainable : out.frozen).push_back(n);
  });
  return out;
}

// Parameter subset minimized by the self-supervised phase: everything except
// the cross-attention blocks, the prompt projection, and the policy head.
inline bool phase1_trains(const std::string& name) {
  return name.rfind("xattn.", 0) != 0 && name.rfind("prompt.", 0) != 0 &&
         name.rfind("head.pi.", 0) != 0;
}
// The self-supervised-with-prompting baseline trains all but the policy head.
inline bool smart_only_trains(const std::string& name) {
  return name.rfind("head.pi.", 0) != 0;
}

// ------------------------------------------------------------- forwarding ---
template <class S>
struct forward_trace {
  // Per self-attention head of the final decoder block: probabilities [B,T,T].
  std::vector<std::vector<S>> last_self_attn;
  // Final cross-attention block probabilities [B,T,P].
  std::vector<S> xattn_probs;
  int pmax = 0;
  // TokenLearner weights per encoded observation, rows [K, S] each.
  std::vector<std::vector<S>> tl_weights;
  std::vector<std::array<int, 2>> tl_who;  // (row, step) per encoded observation
};

template <class S>
struct forward_opts {
  bool with_prompt = false;    // cross-attention conditioning
  bool prefix_prompt = false;  // prepend prompt tokens instead (disables cross-attention)
  bool leak_l2 = false;        // diagnostic: drop the anti-leak exclusions in pass 2
  bool want_masked_pass = true;
  rng* dropout_rng = nullptr;  // supplied only during training when dropout > 0
  forward_trace<S>* trace = nullptr;
};

using mask_ptr = std::shared_ptr<const std::vector<std::uint8_t>>;

// 1 = attention blocked. Slot i may attend slot j iff j <= i.
inline mask_ptr causal_mask_bytes(int b, int t) {
  auto m = std::make_shared<std::vector<std::uint8_t>>(std::size_t(b) * t * t, std::uint8_t(0));
  for (int r = 0; r < b; ++r)
    for (int i = 0; i < t; ++i)
      for (int j = i + 1; j < t; ++j)
        (*m)[std::size_t((r * t + i) * t + j)] = 1;
  return m;
}

// Causal mask plus the inverse-dynamics exclusions: state slot k of step s
// blocks the action slots of step s-1 from index k-(K-A_prev) on, where
// A_prev is that step's action token count. Prediction of action token a is
// read at state slot K-A_prev+a, so exactly the tokens < a stay visible.
inline mask_ptr exclusion_mask_bytes(const model_config& cfg, const sequence_batch& batch,
                                     int prefix) {
  const int b = int(batch.rows.size());
  const int t = prefix + cfg.seq_slots();
  auto base = causal_mask_bytes(b, t);
  auto m = std::make_shared<std::vector<std::uint8_t>>(*base);
  const int k = cfg.state_tokens;
  for (int r = 0; r < b; ++r) {
    const auto& row = batch.rows[std::size_t(r)];
    for (int s = 1; s < cfg.context_length; ++s) {
      if (!row.steps[std::size_t(s)].valid || !row.steps[std::size_t(s - 1)].valid) continue;
      const int a_prev = row.steps[std::size_t(s - 1)].action_count;
      if (a_prev <= 0) continue;
      for (int kk = 0; kk < k; ++kk) {
        const int qi = prefix + cfg.state_slot(s, kk);
        const int thresh = kk - (k - a_prev);  // visible action token indices are < thresh
        for (int a = std::max(0, thresh); a < cfg.action_tokens_max; ++a)
          (*m)[std::size_t((r * t + qi) * t + (prefix + cfg.action_slot(s - 1, a)))] = 1;
      }
    }
  }
  return m;
}

namespace detail {

template <class S>
tensor<S> maybe_dropout(const tensor<S>& x, const forward_opts<S>& opts, double rate) {
  if (rate <= 0.0 || opts.dropout_rng == nullptr) return x;
  return dropout(x, rate, *opts.dropout_rng);
}

template <class S>
tensor<S> self_attention(const control_model<S>& m, const block_params<S>& bp,
                         const tensor<S>& x, int b, int t, const mask_ptr& mask,
                         const forward_opts<S>& opts, bool record_trace) {
  const int d = m.cfg.embed_dim, h = m.cfg.attention_heads, hd = m.cfg.head_dim();
  auto xn = layer_norm(x, bp.ln1_g, bp.ln1_b);
  auto q = reshape(add_rowwise(matmul(xn, bp.attn.wq), bp.attn.bq), {b, t, d});
  auto k = reshape(add_rowwise(matmul(xn, bp.attn.wk), bp.attn.bk), {b, t, d});
  auto v = reshape(add_rowwise(matmul(xn, bp.attn.wv), bp.attn.bv), {b, t, d});
  std::vector<tensor<S>> heads;
  heads.reserve(std::size_t(h));
  for (int i = 0; i < h; ++i) {
    auto qh = slice(q, 2, i * hd, hd);
    auto kh = slice(k, 2, i * hd, hd);
    auto vh = slice(v, 2, i * hd, hd);
    auto sc = scale(bmm(qh, kh, false, true), S(1) / S(std::sqrt(double(hd))));
    auto pr = softmax(masked_fill(sc, mask, S(-1e30)), 2);
    if (record_trace && opts.trace) opts.trace->last_self_attn.push_back(pr.value());
    heads.push_back(bmm(pr, vh));
  }
  auto out = reshape(concat(heads, 2), {b * t, d});
  out = add_rowwise(matmul(out, bp.attn.wo), bp.attn.bo);
  return maybe_dropout(out, opts, m.cfg.dropout);
}

template <class S>
tensor<S> mlp_block(const control_model<S>& m, const block_params<S>& bp, const tensor<S>& x,
                    const forward_opts<S>& opts) {
  auto xn = layer_norm(x, bp.ln2_g, bp.ln2_b);
  auto hidden = gelu(add_rowwise(matmul(xn, bp.mw1), bp.mb1));
  return maybe_dropout(add_rowwise(matmul(hidden, bp.mw2), bp.mb2), opts, m.cfg.dropout);
}

}  // namespace detail

// Batched prompt context: encoded prompt tokens padded to a common length.
template <class S>
struct prompt_context {
  tensor<S> flat;  // [B*P, d]
  int pmax = 0;
  std::vector<int> counts;
  mask_ptr pad_mask;  // [B, T, P], built for the sequence length it conditions
};

template <class S>
prompt_context<S> encode_prompts(const control_model<S>& m, const sequence_batch& batch, int t) {
  const int b = int(batch.rows.size());
  prompt_context<S> ctx;
  std::vector<tensor<S>> parts;
  std::vector<std::vector<int>> maps;
  ctx.counts.resize(std::size_t(b));
  std::vector<tensor<S>> encoded(static_cast<std::size_t>(b));
  for (int r = 0; r < b; ++r) {
    const auto& row = batch.rows[std::size_t(r)];
    check(row.has_prompt, "prompt conditioning requested but row " + std::to_string(r) +
                              " carries no prompt");
    encoded[std::size_t(r)] = m.prompt_enc.encode(row.prompt);
    const int p = encoded[std::size_t(r)].dim(0);
    check(p >= 1, "prompt with zero tokens rejected");
    ctx.counts[std::size_t(r)] = p;
    ctx.pmax = std::max(ctx.pmax, p);
  }
  for (int r = 0; r < b; ++r) {
    std::vector<int> rows(std::size_t(ctx.counts[std::size_t(r)]));
    for (int i = 0; i < ctx.counts[std::size_t(r)]; ++i) rows[std::size_t(i)] = r * ctx.pmax + i;
    parts.push_back(encoded[std::size_t(r)]);
    maps.push_back(std::move(rows));
  }
  ctx.flat = scatter_rows(parts, maps, b * ctx.pmax);
  auto pm = std::make_shared<std::vector<std::uint8_t>>(std::size_t(b) * t * ctx.pmax,
                                                        std::uint8_t(0));
  for (int r = 0; r < b; ++r)
    for (int i = 0; i < t; ++i)
      for (int p = ctx.counts[std::size_t(r)]; p < ctx.pmax; ++p)
        (*pm)[std::size_t((r * t + i) * ctx.pmax + p)] = 1;
  ctx.pad_mask = pm;
  return ctx;
}

namespace detail {

template <class S>
tensor<S> cross_attention(const control_model<S>& m, const xattn_params<S>& xp,
                          const tensor<S>& x, int b, int t, const prompt_context<S>& pc,
                          const forward_opts<S>& opts, bool record_trace) {
  const int d = m.cfg.embed_dim;
  auto xn = layer_norm(x, xp.ln_g, xp.ln_b);
  auto q = reshape(add_rowwise(matmul(xn, xp.at.wq), xp.at.bq), {b, t, d});
  auto k = reshape(add_rowwise(matmul(pc.flat, xp.at.wk), xp.at.bk), {b, pc.pmax, d});
  auto v = reshape(add_rowwise(matmul(pc.flat, xp.at.wv), xp.at.bv), {b, pc.pmax, d});
  auto sc = scale(bmm(q, k, false, true), S(1) / S(std::sqrt(double(d))));
  auto pr = softmax(masked_fill(sc, pc.pad_mask, S(-1e30)), 2);
  if (record_trace && opts.trace) {
    opts.trace->xattn_probs = pr.value();
    opts.trace->pmax = pc.pmax;
  }
  auto out = reshape(bmm(pr, v), {b * t, d});
  out = add_rowwise(matmul(out, xp.at.wo), xp.at.bo);
  return maybe_dropout(out, opts, m.cfg.dropout);
}

}  // namespace detail

// Runs the decoder stack over a prepared token matrix.
template <class S>
tensor<S> run_decoder(const control_model<S>& m, const tensor<S>& x0, int b, int t,
                      const mask_ptr& attn_mask, const prompt_context<S>* pc,
                      const forward_opts<S>& opts, bool record_trace) {
  tensor<S> x = x0;
  const int layers = m.cfg.decoder_layers;
  for (int i = 0; i < layers; ++i) {
    const bool last = i + 1 == layers;
    x = add(x, detail::self_attention(m, m.blocks[std::size_t(i)], x, b, t, attn_mask, opts,
                                      record_trace && last));
    x = add(x, detail::mlp_block(m, m.blocks[std::size_t(i)], x, opts));
    if (pc != nullptr) {
      const int j = i - (layers - m.cfg.xattn_layers);
      if (j >= 0)
        x = add(x, detail::cross_attention(m, m.xblocks[std::size_t(j)], x, b, t, *pc, opts,
                                           record_trace && j + 1 == m.cfg.xattn_layers));
    }
  }
  return x;
}

// ------------------------------------------------------ batched encoding ---
template <class S>
struct encoded_batch {
  tensor<S> z;                               // [Ng*K, d]
  tensor<S> tl_weights;                      // [Ng*K, S] detached
  std::vector<int> g_of;                     // (row*L + step) -> g index or -1
  std::vector<std::vector<S>> pooled;        // per g: mean over K of z (values, no graph)
  std::vector<std::vector<S>> pooled_extra;  // per row: pooled target of the extra obs, or empty
  int count = 0;
};

template <class S>
encoded_batch<S> encode_observations(const control_model<S>& m, const sequence_batch& batch,
                                     forward_trace<S>* trace = nullptr) {
  const auto pcfg = m.cfg.patch();
  const auto tcfg = m.cfg.tl();
  const int b = int(batch.rows.size());
  const int l = m.cfg.context_length;
  const int s = pcfg.tokens(), pd = pcfg.patch_dim(), d = m.cfg.embed_dim;
  const int k = m.cfg.state_tokens;
  encoded_batch<S> enc;
  enc.g_of.assign(std::size_t(b) * l, -1);
  std::vector<S> stack;
  for (int r = 0; r < b; ++r)
    for (int st = 0; st < l; ++st) {
      const auto& step = batch.rows[std::size_t(r)].steps[std::size_t(st)];
      if (!step.valid) continue;
      enc.g_of[std::size_t(r * l + st)] = enc.count++;
      auto p = patches_from_image<S>(step.obs, pcfg);
      stack.insert(stack.end(), p.value().begin(), p.value().end());
      if (trace) trace->tl_who.push_back({r, st});
    }
  check(enc.count > 0, "encode_observations: batch has no valid steps");
  auto patches = tensor<S>::from({enc.count * s, pd}, std::move(stack), false);
  auto toks = patch_embed(patches, m.patch, pcfg);
  auto tl_out = token_learner(toks, m.tl, tcfg);
  enc.z = tl_out.z;
  enc.tl_weights = tl_out.weights;
  if (trace)
    for (int g = 0; g < enc.count; ++g) {
      std::vector<S> w(std::size_t(k) * s);
      std::copy_n(tl_out.weights.value().begin() + std::ptrdiff_t(g) * k * s, std::size_t(k) * s,
                  w.begin());
      trace->tl_weights.push_back(std::move(w));
    }
  // Forward-prediction targets: mean over K of the state tokens, detached.
  enc.pooled.resize(std::size_t(enc.count), std::vector<S>(std::size_t(d), S(0)));
  const auto& zv = enc.z.value();
  for (int g = 0; g < enc.count; ++g)
    for (int kk = 0; kk < k; ++kk)
      for (int c = 0; c < d; ++c)
        enc.pooled[std::size_t(g)][std::size_t(c)] += zv[std::size_t(((g * k) + kk) * d + c)] / S(k);
  // The trailing target-only observation never joins the gradient graph.
  enc.pooled_extra.resize(std::size_t(b));
  {
    no_grad guard;
    for (int r = 0; r < b; ++r) {
      const auto& row = batch.rows[std::size_t(r)];
      if (!row.has_extra_obs) continue;
      auto p = patches_from_image<S>(row.extra_obs, pcfg);
      auto t2 = patch_embed(p, m.patch, pcfg);
      auto z2 = token_learner(t2, m.tl, tcfg).z;  // [K, d]
      std::vector<S> pooled(std::size_t(d), S(0));
      for (int kk = 0; kk < k; ++kk)
        for (int c = 0; c < d; ++c)
          pooled[std::size_t(c)] += z2.value()[std::size_t(kk * d + c)] / S(k);
      enc.pooled_extra[std::size_t(r)] = std::move(pooled);
    }
  }
  return enc;
}

// Assembles the decoder input [B*(prefix+T), d]: scattered state tokens plus
// action-token embeddings plus per-step timestep embeddings (and the prompt
// prefix in prefix mode). Collisions in scatter_rows add, composing the sum.
template <class S>
tensor<S> assemble_sequence(const control_model<S>& m, const sequence_batch& batch,
                            const encoded_batch<S>& enc, bool use_l3_mask, int prefix,
                            const tensor<S>* prefix_flat) {
  const model_config& cfg = m.cfg;
  const int b = int(batch.rows.size());
  const int l = cfg.context_length, k = cfg.state_tokens, amax = cfg.action_tokens_max;
  const int t = prefix + cfg.seq_slots();
  std::vector<tensor<S>> parts;
  std::vector<std::vector<int>> maps;

  // State tokens.
  {
    std::vector<int> rows(std::size_t(enc.count) * k);
    std::size_t at = 0;
    for (int r = 0; r < b; ++r)
      for (int st = 0; st < l; ++st) {
        if (enc.g_of[std::size_t(r * l + st)] < 0) continue;
        for (int kk = 0; kk < k; ++kk) rows[at++] = r * t + prefix + cfg.state_slot(st, kk);
      }
    parts.push_back(enc.z);
    maps.push_back(std::move(rows));
  }
  // Action-token embeddings and timestep embeddings for valid steps.
  {
    std::vector<int> ids, rows, tids, trows;
    for (int r = 0; r < b; ++r) {
      const auto& row = batch.rows[std::size_t(r)];
      for (int st = 0; st < l; ++st) {
        const auto& step = row.steps[std::size_t(st)];
        if (!step.valid) continue;
        for (int slot = 0; slot < k + amax; ++slot) {
          tids.push_back(st);
          trows.push_back(r * t + prefix + st * (k + amax) + slot);
        }
        for (int a = 0; a < amax; ++a) {
          int id = kPadTokenId;
          if (a < step.action_count) {
            if (a >= int(step.action_ids.size()))
              id = kMaskTokenId;  // rollout: token not decoded yet
            else if (use_l3_mask && batch.has_mask &&
                     batch.mask.masked[std::size_t(r)][std::size_t(st * amax + a)])
              id = kMaskTokenId;
            else
              id = step.action_ids[std::size_t(a)];
          }
          ids.push_back(id);
          rows.push_back(r * t + prefix + cfg.action_slot(st, a));
        }
      }
    }
    parts.push_back(gather_rows(m.act_emb, ids));
    maps.push_back(std::move(rows));
    parts.push_back(gather_rows(m.t_emb, tids));
    maps.push_back(std::move(trows));
  }
  if (prefix > 0) {
    check(prefix_flat != nullptr, "assemble_sequence: prefix mode needs prompt tokens");
    std::vector<int> rows(std::size_t(b) * prefix);
    for (int r = 0; r < b; ++r)
      for (int p = 0; p < prefix; ++p) rows[std::size_t(r * prefix + p)] = r * t + p;
    parts.push_back(*prefix_flat);
    maps.push_back(std::move(rows));
  }
  return scatter_rows(parts, maps, b * t);
}

// ------------------------------------------------------------ full passes ---
template <class S>
struct phase1_out {
  encoded_batch<S> enc;
  tensor<S> h_causal;     // feeds f1 (and pi under joint training)
  tensor<S> h_exclusion;  // feeds f2 (alias of h_causal when leak_l2 is on)
  tensor<S> h_masked;     // feeds f3 (unset when no mask requested)
  bool has_masked = false;
  int b = 0, t = 0;
};

template <class S>
phase1_out<S> phase1_forward(const control_model<S>& m, const sequence_batch& batch,
                             const forward_opts<S>& opts = {}) {
  check(!opts.prefix_prompt, "phase1_forward: prefix prompting is a policy-pass feature");
  phase1_out<S> out;
  out.b = int(batch.rows.size());
  out.t = m.cfg.seq_slots();
  out.enc = encode_observations(m, batch, opts.trace);
  prompt_context<S> pc;
  const bool prompts = opts.with_prompt;
  if (prompts) pc = encode_prompts(m, batch, out.t);
  auto x0 = assemble_sequence<S>(m, batch, out.enc, /*use_l3_mask=*/false, 0, nullptr);
  auto causal = causal_mask_bytes(out.b, out.t);
  out.h_causal = run_decoder(m, x0, out.b, out.t, causal, prompts ? &pc : nullptr, opts,
                             opts.trace != nullptr);
  if (opts.leak_l2) {
    out.h_exclusion = out.h_causal;
  } else {
    auto excl = exclusion_mask_bytes(m.cfg, batch, 0);
    out.h_exclusion = run_decoder(m, x0, out.b, out.t, excl, prompts ? &pc : nullptr, opts, false);
  }
  if (opts.want_masked_pass && batch.has_mask && batch.mask.count() > 0) {
    auto xm = assemble_sequence<S>(m, batch, out.enc, /*use_l3_mask=*/true, 0, nullptr);
    out.h_masked = run_decoder(m, xm, out.b, out.t, causal, prompts ? &pc : nullptr, opts, false);
    out.has_masked = true;
  }
  return out;
}

template <class S>
struct policy_out {
  encoded_batch<S> enc;
  tensor<S> h;
  int b = 0, t = 0, prefix = 0;
};

// Prompt-conditioned pass for the policy head: cross-attention by default,
// causal prefix tokens in prefix mode.
template <class S>
policy_out<S> policy_forward(const control_model<S>& m, const sequence_batch& batch,
                             const forward_opts<S>& opts = {}) {
  policy_out<S> out;
  out.b = int(batch.rows.size());
  out.enc = encode_observations(m, batch, opts.trace);
  if (opts.prefix_prompt) {
    prompt_context<S> pc = encode_prompts(m, batch, 1);  // pad mask unused here
    out.prefix = pc.pmax;
    out.t = out.prefix + m.cfg.seq_slots();
    auto x0 = assemble_sequence<S>(m, batch, out.enc, false, out.prefix, &pc.flat);
    out.h = run_decoder<S>(m, x0, out.b, out.t, causal_mask_bytes(out.b, out.t), nullptr, opts,
                           opts.trace != nullptr);
  } else {
    out.t = m.cfg.seq_slots();
    prompt_context<S> pc = encode_prompts(m, batch, out.t);
    auto x0 = assemble_sequence<S>(m, batch, out.enc, false, 0, nullptr);
    out.h = run_decoder(m, x0, out.b, out.t, causal_mask_bytes(out.b, out.t), &pc, opts,
                        opts.trace != nullptr);
  }
  return out;
}

// -------------------------------------------------------- loss index plan ---
// Read positions (rows of the flattened hidden matrix) and targets for every
// loss term. Padding and invalid slots never enter any list.
struct loss_index_plan {
  std::vector<int> l1_pos;                       // last valid action slot of step s
  std::vector<std::array<int, 2>> l1_target;     // {0, g} in-sequence / {1, row} extra obs
  std::vector<int> l2_pos;                       // state slots of step s+1
  std::vector<int> l2_ids;
  std::vector<int> l3_pos;                       // masked action slots
  std::vector<int> l3_ids;
  std::vector<int> pi_pos;                       // previous slot, GPT-style
  std::vector<int> pi_ids;
};

inline loss_index_plan build_index_plan(const model_config& cfg, const sequence_batch& batch,
                                        const std::vector<int>& g_of, int prefix) {
  loss_index_plan plan;
  const int b = int(batch.rows.size());
  const int l = cfg.context_length, k = cfg.state_tokens, amax = cfg.action_tokens_max;
  const int t = prefix + cfg.seq_slots();
  for (int r = 0; r < b; ++r) {
    const auto& row = batch.rows[std::size_t(r)];
    for (int s = 0; s < l; ++s) {
      const auto& step = row.steps[std::size_t(s)];
      if (!step.valid || int(step.action_ids.size()) != step.action_count) continue;
      const int a_n = step.action_count;
      const bool next_valid = s + 1 < l && row.steps[std::size_t(s + 1)].valid;
      const bool last_valid = !next_valid;
      // L1: predict the next observation's pooled embedding from the last
      // action slot of step s, when a next observation exists.
      if (next_valid) {
        plan.l1_pos.push_back(r * t + prefix + cfg.action_slot(s, a_n - 1));
        plan.l1_target.push_back({0, g_of[std::size_t(r * l + s + 1)]});
      } else if (last_valid && row.has_extra_obs) {
        plan.l1_pos.push_back(r * t + prefix + cfg.action_slot(s, a_n - 1));
        plan.l1_target.push_back({1, r});
      }
      // L2: recover each action token of step s at state slot K-A+a of step s+1.
      if (next_valid) {
        for (int a = 0; a < a_n; ++a) {
          plan.l2_pos.push_back(r * t + prefix + cfg.state_slot(s + 1, k - a_n + a));
          plan.l2_ids.push_back(step.action_ids[std::size_t(a)]);
        }
      }
      // L3: recover masked action tokens in place.
      if (batch.has_mask) {
        for (int a = 0; a < a_n; ++a)
          if (batch.mask.masked[std::size_t(r)][std::size_t(s * amax + a)]) {
            plan.l3_pos.push_back(r * t + prefix + cfg.action_slot(s, a));
            plan.l3_ids.push_back(step.action_ids[std::size_t(a)]);
          }
      }
      // Policy: token a reads the slot just before it.
      for (int a = 0; a < a_n; ++a) {
        const int pos = a == 0 ? cfg.state_slot(s, k - 1) : cfg.action_slot(s, a - 1);
        plan.pi_pos.push_back(r * t + prefix + pos);
        plan.pi_ids.push_back(step.action_ids[std::size_t(a)]);
      }
    }
  }
  return plan;
}

}  // namespace dm
