#include "dualmind/datastore.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "dualmind/sha256.hpp"
#include "json.hpp"

namespace dm {

namespace {

// ------------------------------------------------- little-endian packing ---
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}
void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}
void put_f64(std::vector<std::uint8_t>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}
void put_str(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, std::uint32_t(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

struct reader {
  const std::uint8_t* p;
  std::size_t left;

  void need(std::size_t n) const {
    check(left >= n, "shard blob: truncated record (need " + std::to_string(n) +
                         " bytes, have " + std::to_string(left) + ")");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
    p += 4, left -= 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    p += 8, left -= 8;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::uint8_t u8() {
    need(1);
    const std::uint8_t v = *p;
    ++p, --left;
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n, left -= n;
    return s;
  }
  image img() {
    std::size_t consumed = 0;
    image im = image_from_blob(p, left, &consumed);
    p += consumed, left -= consumed;
    return im;
  }
};

void encode_episode(std::vector<std::uint8_t>& out, const episode_record& e) {
  put_str(out, e.domain);
  put_str(out, e.task_id);
  put_u64(out, e.seed);
  put_u32(out, std::uint32_t(e.family));
  out.push_back(e.heldout ? 1 : 0);
  out.push_back(std::uint8_t(e.prompt.kind));
  switch (e.prompt.kind) {
    case prompt_kind::goal_image: {
      const auto blob = image_to_blob(e.prompt.img);
      out.insert(out.end(), blob.begin(), blob.end());
      break;
    }
    case prompt_kind::object_id:
      put_u32(out, std::uint32_t(e.prompt.object));
      break;
    case prompt_kind::language:
      put_str(out, e.prompt.text);
      break;
  }
  const int t = e.length();
  put_u32(out, std::uint32_t(t));
  for (const auto& o : e.observations) {
    const auto blob = image_to_blob(o);
    out.insert(out.end(), blob.begin(), blob.end());
  }
  for (const auto& a : e.actions) {
    put_u32(out, std::uint32_t(a.size()));
    for (float v : a) put_f32(out, v);
  }
  for (double r : e.rewards) put_f64(out, r);
  put_u32(out, std::uint32_t(e.shortest_length));
  out.push_back(e.success ? 1 : 0);
}

episode_record decode_episode(const std::uint8_t* p, std::size_t len) {
  reader r{p, len};
  episode_record e;
  e.domain = r.str();
  e.task_id = r.str();
  e.seed = r.u64();
  e.family = int(r.u32());
  e.heldout = r.u8() != 0;
  e.prompt.kind = prompt_kind(r.u8());
  switch (e.prompt.kind) {
    case prompt_kind::goal_image: e.prompt.img = r.img(); break;
    case prompt_kind::object_id: e.prompt.object = int(r.u32()); break;
    case prompt_kind::language: e.prompt.text = r.str(); break;
    default: throw std::invalid_argument("shard blob: unknown prompt kind");
  }
  const int t = int(r.u32());
  e.observations.reserve(std::size_t(t) + 1);
  for (int i = 0; i <= t; ++i) e.observations.push_back(r.img());
  e.actions.resize(std::size_t(t));
  for (auto& a : e.actions) {
    a.resize(r.u32());
    for (auto& v : a) v = r.f32();
  }
  e.rewards.resize(std::size_t(t));
  for (auto& v : e.rewards) v = r.f64();
  e.shortest_length = int(r.u32());
  e.success = r.u8() != 0;
  check(r.left == 0, "shard blob: trailing bytes after record");
  return e;
}

nlohmann::json spec_to_json(const action_spec& s) {
  nlohmann::json j;
  j["discrete"] = s.discrete;
  j["bins"] = s.bins;
  if (s.discrete) {
    j["cardinality"] = s.cardinality;
  } else {
    j["lo"] = s.lo;
    j["hi"] = s.hi;
  }
  return j;
}

action_spec spec_from_json(const std::string& domain, const nlohmann::json& j) {
  action_spec s;
  s.domain = domain;
  s.discrete = j.at("discrete").get<bool>();
  s.bins = j.at("bins").get<int>();
  if (s.discrete) {
    s.cardinality = j.at("cardinality").get<int>();
  } else {
    s.lo = j.at("lo").get<std::vector<double>>();
    s.hi = j.at("hi").get<std::vector<double>>();
  }
  s.validate();
  return s;
}

bool specs_equal(const action_spec& a, const action_spec& b) {
  return a.domain == b.domain && a.discrete == b.discrete && a.cardinality == b.cardinality &&
         a.lo == b.lo && a.hi == b.hi && a.bins == b.bins;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(bool(in), "datastore: cannot open " + path);
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                  std::istreambuf_iterator<char>()};
  return bytes;
}

}  // namespace

void episode_record::validate() const {
  check(!domain.empty(), "episode: empty domain id");
  check(observations.size() == actions.size() + 1,
        "episode '" + task_id + "': want |observations| = |actions|+1, got " +
            std::to_string(observations.size()) + " observations for " +
            std::to_string(actions.size()) + " actions");
  check(rewards.size() == actions.size(),
        "episode '" + task_id + "': rewards misaligned with actions");
  check(!actions.empty(), "episode '" + task_id + "': empty episode");
}

void dataset::validate() const {
  for (const auto& e : episodes) {
    e.validate();
    check(specs.count(e.domain) == 1,
          "dataset: no action spec for domain '" + e.domain + "'");
  }
  for (const auto& [domain, spec] : specs) {
    check(spec.domain == domain, "dataset: action spec key/domain mismatch for '" + domain + "'");
    spec.validate();
  }
}

void save_shard(const dataset& d, const std::string& base_path) {
  d.validate();
  std::vector<std::uint8_t> blob;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& e : d.episodes) {
    const std::size_t offset = blob.size();
    encode_episode(blob, e);
    index.push_back({{"offset", offset},
                     {"length", blob.size() - offset},
                     {"domain", e.domain},
                     {"task_id", e.task_id},
                     {"split", e.heldout ? "heldout-ood" : "train"}});
  }
  nlohmann::json manifest;
  manifest["format_version"] = dataset::kFormatVersion;
  manifest["content_hash"] = sha256_hex(blob.data(), blob.size());
  nlohmann::json specs;
  for (const auto& [domain, spec] : d.specs) specs[domain] = spec_to_json(spec);
  manifest["action_specs"] = specs;
  manifest["episodes"] = index;

  std::ofstream bin(base_path + ".bin", std::ios::binary);
  check(bool(bin), "datastore: cannot write " + base_path + ".bin");
  bin.write(reinterpret_cast<const char*>(blob.data()), std::streamsize(blob.size()));
  check(bool(bin), "datastore: blob write failed for " + base_path);
  std::ofstream js(base_path + ".json", std::ios::binary);
  check(bool(js), "datastore: cannot write " + base_path + ".json");
  js << manifest.dump(2) << "\n";
  check(bool(js), "datastore: manifest write failed for " + base_path);
}

dataset load_shard(const std::string& base_path) {
  const auto manifest = nlohmann::json::parse(read_file(base_path + ".json"));
  check(manifest.at("format_version").get<int>() == dataset::kFormatVersion,
        "datastore: unsupported shard format version in " + base_path);
  const auto blob = read_file(base_path + ".bin");
  const std::string hash = sha256_hex(blob.data(), blob.size());
  check(hash == manifest.at("content_hash").get<std::string>(),
        "datastore: content hash mismatch for " + base_path +
            " (blob does not match its manifest)");

  dataset d;
  d.content_hash = hash;
  for (const auto& [domain, j] : manifest.at("action_specs").items())
    d.specs[domain] = spec_from_json(domain, j);
  for (const auto& entry : manifest.at("episodes")) {
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto length = entry.at("length").get<std::size_t>();
    check(offset + length <= blob.size(), "datastore: episode range outside blob in " + base_path);
    episode_record e = decode_episode(blob.data() + offset, length);
    check(e.domain == entry.at("domain").get<std::string>(),
          "datastore: manifest/blob domain mismatch in " + base_path);
    check(e.heldout == (entry.at("split").get<std::string>() == "heldout-ood"),
          "datastore: manifest/blob split tag mismatch in " + base_path);
    d.episodes.push_back(std::move(e));
  }
  d.validate();
  return d;
}

dataset load_dataset(const std::vector<std::string>& base_paths) {
  check(!base_paths.empty(), "datastore: no shards given");
  dataset all;
  std::string combined;
  for (const auto& path : base_paths) {
    dataset d = load_shard(path);
    combined += d.content_hash;
    for (const auto& [domain, spec] : d.specs) {
      if (all.specs.count(domain))
        check(specs_equal(all.specs[domain], spec),
              "datastore: conflicting action specs for domain '" + domain + "'");
      else
        all.specs[domain] = spec;
    }
    for (auto& e : d.episodes) all.episodes.push_back(std::move(e));
  }
  all.content_hash = base_paths.size() == 1 ? combined : sha256_hex(combined);
  all.validate();
  return all;
}

collect_result collect(const std::function<episode_record(std::uint64_t)>& source,
                       int episodes, std::uint64_t seed) {
  check(episodes >= 1, "collect: episode count must be >= 1");
  seed_splitter split(seed);
  collect_result res;
  int attempts = 0, failures = 0;
  while (int(res.data.episodes.size()) < episodes) {
    const std::uint64_t ep_seed = split.derive("collect.episode", std::uint64_t(attempts));
    ++attempts;
    episode_record e = source(ep_seed);
    e.validate();
    if (!e.success) {
      ++failures;
      ++res.retries;
      check(!(attempts >= 20 && failures * 10 > attempts),
            "collect: expert failure rate " + std::to_string(failures) + "/" +
                std::to_string(attempts) + " exceeds 10%");
      continue;
    }
    res.data.episodes.push_back(std::move(e));
  }
  return res;
}

episode_record run_gridnav_episode(std::uint64_t seed, int family, nav_band band,
                                   prompt_kind kind) {
  gridnav_env env = gridnav_env::make(seed, family, band, kind);
  episode_record e;
  e.domain = "gridnav";
  e.task_id = "gridnav/f" + std::to_string(family) + "/" + to_string(band) + "/seed" +
              std::to_string(seed);
  e.seed = seed;
  e.family = family;
  e.heldout = family >= gridnav_env::kTrainFamilies;
  e.prompt = env.prompt();
  e.shortest_length = env.task().geodesic;
  e.observations.push_back(env.render());
  for (int a : gridnav_expert(env)) {
    auto r = env.step(a);
    e.actions.push_back({float(a)});
    e.rewards.push_back(r.reward);
    e.observations.push_back(std::move(r.observation));
    e.success = r.success;
  }
  return e;
}

episode_record run_reachbin_episode(std::uint64_t seed, bool push, int color) {
  reachbin_env env = reachbin_env::make(seed, push, color);
  episode_record e;
  e.domain = "reachbin";
  e.task_id = std::string("reachbin/") + (push ? "push" : "reach") + "/" +
              default_vocab_words()[std::size_t(color)] + "/seed" + std::to_string(seed);
  e.seed = seed;
  e.family = color * 2 + (push ? 1 : 0);
  e.heldout = reachbin_combo_heldout(push, color);
  e.prompt = env.prompt();
  e.observations.push_back(env.render());
  while (!env.done()) {
    const auto a = env.expert_action();
    auto r = env.step(a);
    e.actions.push_back({float(a[0]), float(a[1])});
    e.rewards.push_back(r.reward);
    e.observations.push_back(std::move(r.observation));
    e.success = r.success;
  }
  return e;
}

sequence_batch sample_batch(const dataset& d, const model_config& cfg, int batch_size,
                            const std::map<std::string, double>& domain_mix,
                            std::uint64_t seed) {
  d.validate();
  check(batch_size >= 1, "sample_batch: batch size must be >= 1");
  check(!domain_mix.empty(), "sample_batch: empty domain mix");
  double mix_total = 0;
  std::map<std::string, std::vector<int>> by_domain;
  for (const auto& [domain, weight] : domain_mix) {
    check(weight >= 0, "sample_batch: negative mix weight for '" + domain + "'");
    mix_total += weight;
    by_domain[domain] = {};
  }
  check(mix_total > 0, "sample_batch: mix weights sum to zero");
  for (int i = 0; i < int(d.episodes.size()); ++i) {
    const auto& e = d.episodes[std::size_t(i)];
    auto it = by_domain.find(e.domain);
    if (it != by_domain.end()) it->second.push_back(i);
  }
  for (const auto& [domain, idx] : by_domain)
    check(!idx.empty(), "sample_batch: no episodes for domain '" + domain + "' in the mix");

  // Largest-remainder row allocation: per-domain counts within +-1 of exact.
  std::vector<std::pair<std::string, double>> exact;
  for (const auto& [domain, weight] : domain_mix)
    exact.emplace_back(domain, double(batch_size) * weight / mix_total);
  std::vector<std::pair<std::string, int>> alloc;
  int assigned = 0;
  for (const auto& [domain, x] : exact) {
    alloc.emplace_back(domain, int(std::floor(x)));
    assigned += alloc.back().second;
  }
  std::vector<std::size_t> order(alloc.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double fa = exact[a].second - std::floor(exact[a].second);
    const double fb = exact[b].second - std::floor(exact[b].second);
    return fa > fb;
  });
  for (std::size_t k = 0; assigned < batch_size; ++k, ++assigned)
    ++alloc[order[k % order.size()]].second;

  seed_splitter split(seed);
  rng r = split.stream("sample.batch");
  sequence_batch batch;
  for (const auto& [domain, rows] : alloc) {
    const auto& pool = by_domain[domain];
    const auto& spec = d.specs.at(domain);
    for (int k = 0; k < rows; ++k) {
      const auto& ep = d.episodes[std::size_t(pool[std::size_t(r.below(pool.size()))])];
      const int t_len = ep.length();
      const int start = int(r.below(std::uint64_t(t_len)));
      const int window = std::min(cfg.context_length, t_len - start);
      std::vector<image> obs(ep.observations.begin() + start,
                             ep.observations.begin() + start + window + 1);
      std::vector<std::vector<int>> ids;
      ids.reserve(std::size_t(window));
      for (int s = start; s < start + window; ++s) {
        const auto& raw = ep.actions[std::size_t(s)];
        ids.push_back(tokenize_action(std::vector<double>(raw.begin(), raw.end()), spec));
      }
      sequence_row row = build_sequence(cfg, domain, obs, ids, spec.tokens_per_step());
      row.has_prompt = true;
      row.prompt = ep.prompt;
      batch.rows.push_back(std::move(row));
    }
  }
  return batch;
}

void apply_mask(sequence_batch& batch, double ratio, std::uint64_t seed) {
  check(ratio >= 0.0 && ratio <= 1.0, "apply_mask: ratio must be in [0,1]");
  check(!batch.rows.empty(), "apply_mask: empty batch");
  const int l = int(batch.rows[0].steps.size());
  int amax = 0;
  for (const auto& row : batch.rows)
    for (const auto& st : row.steps) amax = std::max(amax, st.action_count);
  check(amax >= 1, "apply_mask: batch has no action tokens");

  seed_splitter split(seed);
  rng r = split.stream("apply.mask");
  batch.has_mask = true;
  batch.mask.ratio = ratio;
  batch.mask.seed = seed;
  batch.mask.masked.assign(batch.rows.size(),
                           std::vector<std::uint8_t>(std::size_t(l) * amax, 0));
  if (ratio == 0.0) return;  // empty pattern, nothing to resample

  for (std::size_t row = 0; row < batch.rows.size(); ++row) {
    auto& bits = batch.mask.masked[row];
    // Slots eligible for masking: decided action tokens of valid steps.
    std::vector<int> slots;
    for (int s = 0; s < l; ++s) {
      const auto& st = batch.rows[row].steps[std::size_t(s)];
      if (!st.valid) continue;
      for (int a = 0; a < int(st.action_ids.size()); ++a) slots.push_back(s * amax + a);
    }
    check(!slots.empty(), "apply_mask: row " + std::to_string(row) + " has no action tokens");
    int masked = 0;
    for (int attempt = 0; attempt < 10000 && masked == 0; ++attempt) {
      for (int slot : slots) {
        const bool bit = r.bernoulli(ratio);
        bits[std::size_t(slot)] = bit ? 1 : 0;
        masked += bit ? 1 : 0;
      }
    }
    check(masked >= 1, "apply_mask: failed to mask at least one slot");
  }
}

fewshot_split split_fewshot(const dataset& d, int task_family, int shots, int eval_tasks,
                            std::uint64_t seed) {
  check(shots >= 1, "split_fewshot: shots must be >= 1");
  check(eval_tasks >= 1, "split_fewshot: eval task count must be >= 1");
  std::vector<int> pool;
  std::set<std::uint64_t> used_seeds;
  for (int i = 0; i < int(d.episodes.size()); ++i) {
    const auto& e = d.episodes[std::size_t(i)];
    if (e.family != task_family) continue;
    check(e.heldout, "split_fewshot: family " + std::to_string(task_family) +
                         " contains non-held-out episodes ('" + e.task_id + "')");
    pool.push_back(i);
    used_seeds.insert(e.seed);
  }
  check(int(pool.size()) >= shots,
        "split_fewshot: family " + std::to_string(task_family) + " has only " +
            std::to_string(pool.size()) + " episodes, want " + std::to_string(shots) +
            " shots");

  seed_splitter split(seed);
  rng r = split.stream("fewshot.split", std::uint64_t(task_family));
  for (std::size_t i = pool.size(); i > 1; --i)  // Fisher-Yates
    std::swap(pool[i - 1], pool[std::size_t(r.below(i))]);

  fewshot_split out;
  out.support.assign(pool.begin(), pool.begin() + shots);
  while (int(out.eval_seeds.size()) < eval_tasks) {
    const std::uint64_t s = r.next_u64();
    if (used_seeds.count(s)) continue;  // disjoint from every stored episode seed
    used_seeds.insert(s);
    out.eval_seeds.push_back(s);
  }
  return out;
}

}  // namespace dm
