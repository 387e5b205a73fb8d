#pragma once
// Episode persistence (manifest JSON + binary blob shards), expert data
// collection, the multi-domain window sampler, the action-masking pattern
// generator, and the few-shot support/eval split.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dualmind/env.hpp"
#include "dualmind/model.hpp"
#include "dualmind/tokenize.hpp"

namespace dm {

struct episode_record {
  std::string domain;  // key into the dataset's action specs
  std::string task_id;
  std::uint64_t seed = 0;
  int family = -1;       // generator family (GridNav) / template-color combo (ReachBin)
  bool heldout = false;  // split tag: train vs held-out OOD
  task_prompt prompt;    // stored raw; encoded at batch time
  std::vector<image> observations;         // T+1 frames
  std::vector<std::vector<float>> actions;  // T raw actions (pre-tokenization)
  std::vector<double> rewards;              // T, aligned to actions
  int shortest_length = 0;  // navigation geodesic; 0 where not applicable
  bool success = false;

  int length() const { return int(actions.size()); }
  void validate() const;
};

struct dataset {
  static constexpr int kFormatVersion = 1;
  std::map<std::string, action_spec> specs;  // per domain-id
  std::vector<episode_record> episodes;
  std::string content_hash;  // SHA-256 hex of the blob (set by save/load)

  void validate() const;  // every episode's domain has a spec, invariants hold
};

// Shard I/O: writes `<base>.json` (manifest: version, specs, per-episode
// offsets/lengths/tags, content hash) and `<base>.bin` (packed records,
// little-endian, images as 12-byte H,W,C u32 header + raw u8 payload).
void save_shard(const dataset& d, const std::string& base_path);
dataset load_shard(const std::string& base_path);
// Concatenates several shards; specs must agree across shards.
dataset load_dataset(const std::vector<std::string>& base_paths);

// ------------------------------------------------------------ collection ---
struct collect_result {
  dataset data;
  int retries = 0;  // expert failures that were redrawn
};

// Draws per-episode seeds from `seed`, calls `source` (which rolls an expert
// episode and reports success), retries failures with fresh seeds, and aborts
// once failures exceed 10% of at least 20 attempts.
collect_result collect(const std::function<episode_record(std::uint64_t)>& source,
                       int episodes, std::uint64_t seed);

// Expert rollouts packaged as records (prompt, frames, raw actions, rewards).
episode_record run_gridnav_episode(std::uint64_t seed, int family, nav_band band,
                                   prompt_kind kind);
episode_record run_reachbin_episode(std::uint64_t seed, bool push, int color);

// -------------------------------------------------------------- sampling ---
// Each row: uniform episode from its domain, uniform start index, window of
// min(L, remaining) steps right-padded to L, actions tokenized per spec and
// padded to A_max across domains. Rows per domain match the requested mix
// within one row. Rows carry the stored prompt.
sequence_batch sample_batch(const dataset& d, const model_config& cfg, int batch_size,
                            const std::map<std::string, double>& domain_mix,
                            std::uint64_t seed);

// Bernoulli(ratio) over valid action slots, per row resampled until at least
// one slot is masked (ratio > 0). ratio = 0 yields an empty pattern.
void apply_mask(sequence_batch& batch, double ratio, std::uint64_t seed);

// ------------------------------------------------------------- few-shot ----
struct fewshot_split {
  std::vector<int> support;             // indices into d.episodes, exactly `shots`
  std::vector<std::uint64_t> eval_seeds;  // disjoint from every support seed
};

// Support = first `shots` held-out episodes of `task_family` under a seeded
// shuffle; eval seeds are fresh draws avoiding all stored seeds of the family.
fewshot_split split_fewshot(const dataset& d, int task_family, int shots,
                            int eval_tasks, std::uint64_t seed);

}  // namespace dm
