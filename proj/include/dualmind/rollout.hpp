#pragma once
// Greedy closed-loop control: per-token action decoding against the trained
// model, episode evaluation over seeded task suites (optionally in parallel),
// and attention-map export for qualitative inspection.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "dualmind/datastore.hpp"
#include "dualmind/env.hpp"
#include "dualmind/metrics.hpp"
#include "dualmind/model.hpp"
#include "dualmind/train.hpp"

namespace dm {

// Which readout produces action logits.
//  pi:             the imitation policy head at the GPT-style previous slot.
//  masked_inverse: the masked-action recovery head read at the undecided
//                  action slot itself (whose input is the MASK embedding) —
//                  the zero-shot readout for models trained without phase II.
enum class policy_head { pi, masked_inverse };

struct rollout_config {
  policy_head head = policy_head::pi;
  bool with_prompt = true;     // cross-attention conditioning
  bool prefix_prompt = false;  // prompt tokens prepended instead
};

// Hook receiving, per decided step, the per-patch attention weights of the
// current observation (convex, summing to 1 over the patch grid).
using attention_sink = std::function<void(int step, const std::vector<double>& patch_weights)>;

// ------------------------------------------------- greedy token decoding ---
// Maintains the rolling context window and decodes one action token at a
// time; each token re-runs the forward pass with the final step left
// partially labeled (undecided slots read MASK embeddings, which the causal
// mask keeps invisible to the readout position).
template <class S>
class greedy_controller {
 public:
  greedy_controller(const control_model<S>& m, rollout_config opts, action_spec spec,
                    std::string domain, task_prompt prompt)
      : m_(m), opts_(opts), spec_(std::move(spec)), domain_(std::move(domain)),
        prompt_(std::move(prompt)) {
    spec_.validate();
    check(spec_.tokens_per_step() <= m.cfg.action_tokens_max,
          "greedy_controller: domain needs " + std::to_string(spec_.tokens_per_step()) +
              " action tokens, model allows " + std::to_string(m.cfg.action_tokens_max));
  }

  // Decodes the token ids for the current observation. Does not advance the
  // window; call commit() with the executed ids afterwards.
  std::vector<int> decide(const image& obs, attention_sink* sink = nullptr, int env_step = 0) {
    const int a_tokens = spec_.tokens_per_step();
    std::vector<int> ids;
    for (int a = 0; a < a_tokens; ++a) {
      sequence_batch batch = window_batch(obs, ids);
      const int s = int(history_.size());  // current step index inside the window

      forward_opts<S> fo;
      fo.want_masked_pass = false;
      forward_trace<S> trace;
      const bool want_trace = sink != nullptr && a == 0;
      if (want_trace) fo.trace = &trace;

      // Prompted rollouts run the policy pass; unprompted ones reuse the
      // causal self-supervised pass (undecided slots already read the MASK
      // embedding there, so the recovery head sees its training-time input).
      tensor<S> h;
      int prefix = 0, t = 0;
      if (opts_.with_prompt || opts_.prefix_prompt) {
        fo.with_prompt = !opts_.prefix_prompt;
        fo.prefix_prompt = opts_.prefix_prompt;
        policy_out<S> out = policy_forward(m_, batch, fo);
        h = out.h;
        prefix = out.prefix;
        t = out.t;
      } else {
        fo.leak_l2 = true;  // the exclusion pass is unused here; alias it away
        phase1_out<S> out = phase1_forward(m_, batch, fo);
        h = out.h_causal;
        t = out.t;
      }

      int pos;
      const tensor<S>*w, *b;
      if (opts_.head == policy_head::pi) {
        pos = a == 0 ? m_.cfg.state_slot(s, m_.cfg.state_tokens - 1)
                     : m_.cfg.action_slot(s, a - 1);
        w = &m_.piw;
        b = &m_.pib;
      } else {  // read the MASK-fed slot with the recovery head
        pos = m_.cfg.action_slot(s, a);
        w = &m_.f3w;
        b = &m_.f3b;
      }
      pos += prefix;
      tensor<S> logits = head_readout(h, {pos}, *w, *b);
      const int limit = spec_.discrete ? spec_.cardinality : kActionBins;
      int best = 0;
      for (int i = 1; i < limit; ++i)
        if (logits.value()[std::size_t(i)] > logits.value()[std::size_t(best)]) best = i;
      ids.push_back(best);
      if (want_trace) emit_attention(*sink, env_step, trace, t, prefix, pos, s);
    }
    return ids;
  }

  // Appends the executed step to the window (oldest step falls out at L).
  void commit(const image& obs, std::vector<int> ids) {
    history_.emplace_back(obs, std::move(ids));
    while (int(history_.size()) >= m_.cfg.context_length) history_.pop_front();
  }

 private:
  sequence_batch window_batch(const image& obs, const std::vector<int>& partial) const {
    std::vector<image> observations;
    std::vector<std::vector<int>> actions;
    for (const auto& [o, a] : history_) {
      observations.push_back(o);
      actions.push_back(a);
    }
    observations.push_back(obs);
    actions.push_back(partial);
    sequence_row row =
        build_sequence(m_.cfg, domain_, observations, actions, spec_.tokens_per_step());
    if (opts_.with_prompt || opts_.prefix_prompt) {
      row.has_prompt = true;
      row.prompt = prompt_;
    }
    sequence_batch batch;
    batch.rows.push_back(std::move(row));
    return batch;
  }

  // Collapses the last-block self-attention row at the readout position onto
  // the current observation's patch grid via the TokenLearner weights.
  void emit_attention(attention_sink& sink, int env_step, const forward_trace<S>& trace,
                      int t, int prefix, int pos, int s) const {
    if (trace.last_self_attn.empty() || trace.tl_weights.empty()) return;
    const int k = m_.cfg.state_tokens;
    // Head-averaged probabilities over the K state slots of the current step.
    std::vector<double> slot(std::size_t(k), 0.0);
    for (const auto& head : trace.last_self_attn)
      for (int kk = 0; kk < k; ++kk)
        slot[std::size_t(kk)] +=
            double(head[std::size_t(pos * t + prefix + m_.cfg.state_slot(s, kk))]);
    double total = 0;
    for (double v : slot) total += v;
    if (total <= 0) return;
    for (double& v : slot) v /= total;  // renormalized K-slice
    // Find the TokenLearner rows of (row 0, step s).
    const std::vector<S>* tl = nullptr;
    for (std::size_t i = 0; i < trace.tl_who.size(); ++i)
      if (trace.tl_who[i][0] == 0 && trace.tl_who[i][1] == s) tl = &trace.tl_weights[i];
    if (tl == nullptr) return;
    const int patches = int(tl->size()) / k;
    std::vector<double> grid(std::size_t(patches), 0.0);
    for (int kk = 0; kk < k; ++kk)
      for (int p = 0; p < patches; ++p)
        grid[std::size_t(p)] += slot[std::size_t(kk)] * double((*tl)[std::size_t(kk * patches + p)]);
    sink(env_step, grid);
  }

  const control_model<S>& m_;
  rollout_config opts_;
  action_spec spec_;
  std::string domain_;
  task_prompt prompt_;
  std::deque<std::pair<image, std::vector<int>>> history_;
};

// ------------------------------------------------------------- episodes ----
struct eval_episode_spec {
  std::string domain;  // "gridnav" | "reachbin"
  std::uint64_t seed = 0;
  // gridnav
  int family = 0;
  nav_band band = nav_band::easy;
  prompt_kind kind = prompt_kind::goal_image;
  // reachbin
  bool push = false;
  int color = 0;

  std::string task_id() const {
    if (domain == "gridnav")
      return "gridnav/f" + std::to_string(family) + "/" + to_string(band) + "/seed" +
             std::to_string(seed);
    return std::string("reachbin/") + (push ? "push" : "reach") + "/" +
           default_vocab_words()[std::size_t(color)] + "/seed" + std::to_string(seed);
  }
};

enum class rollout_policy { model, expert, random };

// One greedy episode; `m` may be null for expert/random policies.
template <class S>
eval_episode run_episode(const control_model<S>* m, const rollout_config& opts,
                         const eval_episode_spec& spec, rollout_policy policy,
                         attention_sink* sink = nullptr) {
  eval_episode rec;
  rec.task = spec.task_id();
  rng rand = seed_splitter(spec.seed).stream("rollout.random");

  if (spec.domain == "gridnav") {
    gridnav_env env = gridnav_env::make(spec.seed, spec.family, spec.band, spec.kind);
    rec.shortest_length = env.task().geodesic;
    const action_spec aspec = gridnav_action_spec();
    std::vector<int> expert_plan;
    std::size_t expert_at = 0;
    if (policy == rollout_policy::expert) expert_plan = gridnav_expert(env);
    std::optional<greedy_controller<S>> ctl;
    if (policy == rollout_policy::model)
      ctl.emplace(*m, opts, aspec, "gridnav", env.prompt());
    image obs = env.render();
    step_result last;
    int steps = 0;
    while (!env.done()) {
      std::vector<int> ids;
      if (policy == rollout_policy::model) {
        ids = ctl->decide(obs, sink, steps);
      } else if (policy == rollout_policy::expert) {
        ids = {expert_plan[expert_at++]};
      } else {
        ids = {int(rand.below(std::uint64_t(aspec.cardinality)))};
      }
      last = env.step(int(detokenize_action(ids, aspec)[0]));
      rec.episode_return += last.reward;
      if (policy == rollout_policy::model) ctl->commit(obs, ids);
      obs = last.observation;
      ++steps;
    }
    rec.success = last.success;
    rec.path_length = std::max(1, last.path_length);  // stop-only episodes count 1
    return rec;
  }

  check(spec.domain == "reachbin", "run_episode: unknown domain '" + spec.domain + "'");
  reachbin_env env = reachbin_env::make(spec.seed, spec.push, spec.color);
  const action_spec aspec = reachbin_action_spec();
  std::optional<greedy_controller<S>> ctl;
  if (policy == rollout_policy::model)
    ctl.emplace(*m, opts, aspec, "reachbin", env.prompt());
  image obs = env.render();
  step_result last;
  int steps = 0;
  while (!env.done()) {
    std::vector<int> ids;
    if (policy == rollout_policy::model) {
      ids = ctl->decide(obs, sink, steps);
    } else if (policy == rollout_policy::expert) {
      ids = tokenize_action({env.expert_action()[0], env.expert_action()[1]}, aspec);
    } else {
      ids = {int(rand.below(256)), int(rand.below(256))};
    }
    const auto raw = detokenize_action(ids, aspec);
    last = env.step({raw[0], raw[1]});
    rec.episode_return += last.reward;
    if (policy == rollout_policy::model) ctl->commit(obs, ids);
    obs = last.observation;
    ++steps;
  }
  rec.success = last.success;
  rec.path_length = steps;
  rec.shortest_length = 0;
  return rec;
}

// ------------------------------------------------------------- evaluate ----
inline int thread_cap() {
  if (const char* env = std::getenv("DUALMIND_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : int(hw);
}

// Rolls every episode in `specs` (all one domain) and aggregates the report.
// Episodes are pre-seeded and results slotted by index, so any thread count
// yields the same report; `threads` is capped by DUALMIND_THREADS.
template <class S>
eval_report evaluate(const control_model<S>* m, const rollout_config& opts,
                     const std::vector<eval_episode_spec>& specs, rollout_policy policy,
                     const std::vector<double>& expert_returns = {}, int expert_window = 10,
                     int threads = 1) {
  check(!specs.empty(), "evaluate: no episodes requested");
  const std::string& domain = specs[0].domain;
  for (const auto& s : specs)
    check(s.domain == domain, "evaluate: mixed domains in one suite");
  check(policy != rollout_policy::model || m != nullptr, "evaluate: model policy without a model");

  std::vector<eval_episode> records(specs.size());
  const int workers = std::max(1, std::min(threads, thread_cap()));
  if (workers == 1) {
    for (std::size_t i = 0; i < specs.size(); ++i)
      records[i] = run_episode<S>(m, opts, specs[i], policy);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(std::size_t(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < specs.size(); i = next.fetch_add(1))
          records[i] = run_episode<S>(m, opts, specs[i], policy);
      });
    for (auto& th : pool) th.join();
  }
  return make_eval_report(std::move(records), /*navigation=*/domain == "gridnav",
                          expert_returns, expert_window);
}

// Seeded task suites.
inline std::vector<eval_episode_spec> gridnav_suite(int episodes, const std::vector<int>& families,
                                                    nav_band band, prompt_kind kind,
                                                    std::uint64_t seed0) {
  check(episodes >= 1 && !families.empty(), "gridnav_suite: empty suite");
  std::vector<eval_episode_spec> specs;
  for (int i = 0; i < episodes; ++i) {
    eval_episode_spec s;
    s.domain = "gridnav";
    s.seed = seed0 + std::uint64_t(i);
    s.family = families[std::size_t(i) % families.size()];
    s.band = band;
    s.kind = kind;
    specs.push_back(s);
  }
  return specs;
}

inline std::vector<eval_episode_spec> reachbin_suite(int episodes, bool heldout,
                                                     std::uint64_t seed0) {
  std::vector<std::pair<bool, int>> combos;
  for (int c = 0; c < kReachColors; ++c)
    for (bool push : {false, true})
      if (reachbin_combo_heldout(push, c) == heldout) combos.emplace_back(push, c);
  check(episodes >= 1 && !combos.empty(), "reachbin_suite: empty suite");
  std::vector<eval_episode_spec> specs;
  for (int i = 0; i < episodes; ++i) {
    eval_episode_spec s;
    s.domain = "reachbin";
    s.seed = seed0 + std::uint64_t(i);
    s.push = combos[std::size_t(i) % combos.size()].first;
    s.color = combos[std::size_t(i) % combos.size()].second;
    specs.push_back(s);
  }
  return specs;
}

}  // namespace dm
