#pragma once
// Two-phase training: the self-supervised objective (forward prediction,
// inverse dynamics, masked action modeling), the prompt-conditioned imitation
// objective, a shared training loop with divergence guard and per-step CSV
// logging, and the mode schedules built on top of both.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dualmind/model.hpp"
#include "dualmind/optim.hpp"
#include "dualmind/ops.hpp"

namespace dm {

struct loss_weights {
  double l1 = 1.0, l2 = 1.0, l3 = 1.0;
};

// Applies an affine head to selected rows of the flattened hidden matrix.
template <class S>
tensor<S> head_readout(const tensor<S>& h, const std::vector<int>& pos, const tensor<S>& w,
                       const tensor<S>& b) {
  return add_rowwise(matmul(gather_rows(h, pos), w), b);
}

template <class S>
tensor<S> zero_loss() {
  return tensor<S>::from({}, std::vector<S>{S(0)}, false);
}

// Mean cross-entropy over the selected tokens.
template <class S>
tensor<S> mean_cross_entropy(const tensor<S>& logits, const std::vector<int>& ids) {
  return mean_all(cross_entropy_logits(logits, ids));
}

// ------------------------------------------------- self-supervised losses ---
template <class S>
struct phase1_loss_out {
  tensor<S> total, l1, l2, l3;
  int l1_count = 0, l2_count = 0, l3_count = 0;
};

// L1: mean squared error between the forward head at each step's last action
// slot and the detached pooled state tokens of the following observation.
// L2: cross-entropy of the inverse head read at next-step state slots on the
// exclusion pass (which hides the predicted action's own tokens).
// L3: cross-entropy of the masked head at masked action slots on the pass
// whose inputs had those slots replaced with the MASK embedding.
template <class S>
phase1_loss_out<S> phase1_losses(const control_model<S>& m, const phase1_out<S>& fwd,
                                 const sequence_batch& batch, const loss_index_plan& plan,
                                 const loss_weights& w = {}) {
  check(batch.has_mask,
        "self-supervised batch must carry a masking pattern (a ratio of 0 is allowed)");
  const int d = m.cfg.embed_dim;
  phase1_loss_out<S> out;
  out.l1_count = int(plan.l1_pos.size());
  out.l2_count = int(plan.l2_ids.size());
  out.l3_count = int(plan.l3_ids.size());

  if (!plan.l1_pos.empty()) {
    std::vector<S> tgt;
    tgt.reserve(plan.l1_pos.size() * std::size_t(d));
    for (const auto& t : plan.l1_target) {
      const auto& src = t[0] == 0 ? fwd.enc.pooled[std::size_t(t[1])]
                                  : fwd.enc.pooled_extra[std::size_t(t[1])];
      check(!src.empty(), "forward-prediction target missing for a planned position");
      tgt.insert(tgt.end(), src.begin(), src.end());
    }
    auto target = tensor<S>::from({int(plan.l1_pos.size()), d}, std::move(tgt), false);
    out.l1 = mse(head_readout(fwd.h_causal, plan.l1_pos, m.f1w, m.f1b), target);
  } else {
    out.l1 = zero_loss<S>();
  }

  if (!plan.l2_pos.empty()) {
    out.l2 = mean_cross_entropy(head_readout(fwd.h_exclusion, plan.l2_pos, m.f2w, m.f2b),
                                plan.l2_ids);
  } else {
    out.l2 = zero_loss<S>();
  }

  if (fwd.has_masked && !plan.l3_pos.empty()) {
    out.l3 =
        mean_cross_entropy(head_readout(fwd.h_masked, plan.l3_pos, m.f3w, m.f3b), plan.l3_ids);
  } else {
    out.l3 = zero_loss<S>();
  }

  out.total = add(add(scale(out.l1, S(w.l1)), scale(out.l2, S(w.l2))), scale(out.l3, S(w.l3)));
  return out;
}

// ------------------------------------------------------- imitation loss -----
template <class S>
struct phase2_loss_out {
  tensor<S> loss;
  int count = 0;
  double accuracy = 0.0;  // greedy token accuracy, diagnostic only
};

template <class S>
phase2_loss_out<S> phase2_loss(const control_model<S>& m, const policy_out<S>& fwd,
                               const loss_index_plan& plan) {
  check(!plan.pi_pos.empty(), "imitation loss: batch contains no labeled action tokens");
  auto logits = head_readout(fwd.h, plan.pi_pos, m.piw, m.pib);
  phase2_loss_out<S> out;
  out.loss = mean_cross_entropy(logits, plan.pi_ids);
  out.count = int(plan.pi_ids.size());
  const auto& lv = logits.value();
  int hit = 0;
  for (int i = 0; i < out.count; ++i) {
    int arg = 0;
    S best = lv[std::size_t(i) * kActionBins];
    for (int c = 1; c < kActionBins; ++c) {
      const S v = lv[std::size_t(i) * kActionBins + std::size_t(c)];
      if (v > best) {
        best = v;
        arg = c;
      }
    }
    hit += int(arg == plan.pi_ids[std::size_t(i)]);
  }
  out.accuracy = double(hit) / double(out.count);
  return out;
}

// ------------------------------------------------------------- training -----
enum class train_objective { self_supervised, imitation, joint };

struct train_config {
  int steps = 1000;
  double lr = 5e-5;
  adamw_config opt;           // lr field overridden by `lr` above
  loss_weights weights;       // self-supervised component weights
  int log_every = 50;         // callback cadence; every row is kept in memory
  int snapshot_every = 500;   // last-good restore granularity for the guard
  bool with_prompt = false;   // condition self-supervised passes on prompts
  bool prefix_prompt = false; // imitation via prompt-prefix instead of cross-attention
  std::uint64_t seed = 0;     // dropout stream
};

struct train_log_row {
  int step = 0;
  double total = 0, l1 = 0, l2 = 0, l3 = 0, lp2 = 0, lr = 0, seconds = 0;
  double accuracy = 0;  // imitation token accuracy (not part of the CSV)
};

inline const char* train_log_header() { return "step,loss_total,L1,L2,L3,L_P2,lr,seconds"; }

inline std::string format_log_row(const train_log_row& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.step << ',' << r.total << ',' << r.l1 << ',' << r.l2 << ',' << r.l3 << ',' << r.lp2
     << ',' << r.lr << ',' << r.seconds;
  return os.str();
}

struct train_result {
  std::vector<train_log_row> log;  // one row per executed step
  bool aborted = false;            // divergence guard fired
  int restored_to_step = -1;       // step of the snapshot restored on abort
  int steps_done = 0;
  std::int64_t skipped_updates = 0;  // optimizer groups skipped on non-finite grads
};

using batch_fn = std::function<sequence_batch(int step)>;
using log_sink = std::function<void(const train_log_row&)>;

// One loop for every mode. `trainable` names the optimizer's parameter set;
// all other parameters are marked requires_grad=false for the duration so the
// tape never materializes their gradients, and are restored afterwards.
template <class S>
train_result run_training(control_model<S>& m, train_objective obj,
                          const std::vector<std::string>& trainable, const batch_fn& next_batch,
                          const train_config& tc, const log_sink& on_log = {}) {
  check(tc.steps >= 1, "training needs at least one step");
  auto all = m.named_params();
  std::map<std::string, tensor<S>> by_name;
  for (auto& [n, p] : all) by_name.emplace(n, p);
  std::vector<std::pair<std::string, tensor<S>>> opt_params;
  for (const auto& n : trainable) {
    auto it = by_name.find(n);
    check(it != by_name.end(), "unknown trainable parameter '" + n + "'");
    opt_params.emplace_back(it->first, it->second);
  }
  check(!opt_params.empty(), "training requires a non-empty trainable set");

  std::vector<tensor<S>> frozen;
  {
    std::map<std::string, int> want;
    for (const auto& n : trainable) want[n] = 1;
    for (auto& [n, p] : all)
      if (!want.count(n)) frozen.push_back(p);
  }
  for (auto& p : frozen) p.set_requires_grad(false);

  adamw_config oc = tc.opt;
  oc.lr = tc.lr;
  adamw<S> opt(opt_params, oc);

  auto snapshot = [&] {
    std::vector<std::vector<S>> s;
    s.reserve(opt_params.size());
    for (auto& [n, p] : opt_params) s.push_back(p.value());
    return s;
  };
  auto restore = [&](const std::vector<std::vector<S>>& s) {
    for (std::size_t i = 0; i < opt_params.size(); ++i) opt_params[i].second.value() = s[i];
  };
  auto good = snapshot();
  int good_step = 0;

  seed_splitter split(tc.seed);
  train_result res;
  int consecutive_bad = 0;
  const auto t0 = std::chrono::steady_clock::now();

  for (int step = 0; step < tc.steps; ++step) {
    sequence_batch batch = next_batch(step);
    rng drop = split.stream("train.dropout", std::uint64_t(step));

    train_log_row row;
    row.step = step;
    row.lr = opt.lr();
    tape<S> tp;
    {
      tape_scope<S> scope(tp);
      tensor<S> total;
      bool have_total = false;
      if (obj != train_objective::imitation) {
        forward_opts<S> opts;
        opts.with_prompt = tc.with_prompt;
        if (m.cfg.dropout > 0) opts.dropout_rng = &drop;
        auto fwd = phase1_forward(m, batch, opts);
        auto plan = build_index_plan(m.cfg, batch, fwd.enc.g_of, 0);
        auto pl = phase1_losses(m, fwd, batch, plan, tc.weights);
        row.l1 = double(pl.l1.item());
        row.l2 = double(pl.l2.item());
        row.l3 = double(pl.l3.item());
        total = pl.total;
        have_total = true;
      }
      if (obj != train_objective::self_supervised) {
        forward_opts<S> opts;
        opts.prefix_prompt = tc.prefix_prompt;
        if (m.cfg.dropout > 0) opts.dropout_rng = &drop;
        auto fwd = policy_forward(m, batch, opts);
        auto plan = build_index_plan(m.cfg, batch, fwd.enc.g_of, fwd.prefix);
        auto p2 = phase2_loss(m, fwd, plan);
        row.lp2 = double(p2.loss.item());
        row.accuracy = p2.accuracy;
        total = have_total ? add(total, p2.loss) : p2.loss;
      }
      row.total = double(total.item());
      if (std::isfinite(row.total)) {
        opt.zero_grad();
        tp.backward_from(total);
      }
    }
    row.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(row);
    ++res.steps_done;

    if (!std::isfinite(row.total)) {
      if (++consecutive_bad >= 2) {
        restore(good);
        res.aborted = true;
        res.restored_to_step = good_step;
        if (on_log) on_log(row);
        break;
      }
    } else {
      consecutive_bad = 0;
      opt.apply();
      opt.zero_grad();
      if ((step + 1) % tc.snapshot_every == 0) {
        good = snapshot();
        good_step = step + 1;
      }
    }
    if (on_log && (step % tc.log_every == 0 || step + 1 == tc.steps)) on_log(row);
  }

  for (auto& p : frozen) p.set_requires_grad(true);
  res.skipped_updates = opt.skipped();
  return res;
}

// Mean training loss over the final `window` executed steps (few-shot report).
inline double mean_tail_loss(const std::vector<train_log_row>& log, int window = 100) {
  check(!log.empty(), "mean_tail_loss: empty log");
  const std::size_t n = log.size();
  const std::size_t w = std::min<std::size_t>(std::size_t(window), n);
  double s = 0;
  for (std::size_t i = n - w; i < n; ++i) s += log[i].total;
  return s / double(w);
}

// Copies checkpoint values into a model in place, shape-checked by name.
template <class S>
void load_parameters(control_model<S>& m, const std::map<std::string, tensor<S>>& ckpt,
                     bool require_all = true) {
  for (auto& [n, p] : m.named_all()) {
    auto it = ckpt.find(n);
    if (it == ckpt.end()) {
      check(!require_all, "checkpoint is missing parameter '" + n + "'");
      continue;
    }
    check(it->second.shape() == p.shape(), "checkpoint shape mismatch for '" + n + "': stored " +
                                               shape_str(it->second.shape()) + " vs model " +
                                               shape_str(p.shape()));
    p.value() = it->second.value();
  }
}

// ------------------------------------------------------ trainable subsets ---
template <class S>
std::vector<std::string> trainable_phase1(control_model<S>& m) {
  std::vector<std::string> out;
  m.visit_params([&](const std::string& n, tensor<S>&) {
    if (phase1_trains(n)) out.push_back(n);
  });
  return out;
}

template <class S>
std::vector<std::string> trainable_smart_only(control_model<S>& m) {
  std::vector<std::string> out;
  m.visit_params([&](const std::string& n, tensor<S>&) {
    if (smart_only_trains(n)) out.push_back(n);
  });
  return out;
}

template <class S>
std::vector<std::string> trainable_all(control_model<S>& m) {
  std::vector<std::string> out;
  m.visit_params([&](const std::string& n, tensor<S>&) { out.push_back(n); });
  return out;
}

}  // namespace dm
