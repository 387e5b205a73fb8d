#pragma once
// Flat key=value run configuration. Files are TOML-like: [section] headers,
// key=value lines, # comments. Every key a command understands is declared
// with a default before parsing; unknown keys in files or flags are rejected.
// CLI flags override file values: --section.key=value, --section.key value,
// or --key value when the bare name is unambiguous across sections. Every
// run writes back a resolved snapshot so results are reproducible from the
// artifact alone.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace dm {

class config {
 public:
  void declare(const std::string& key, const std::string& default_value);
  bool known(const std::string& key) const;

  void set(const std::string& key, const std::string& value);  // rejects unknown keys
  void load_file(const std::string& path);
  // Consumes --key=value / --key value pairs; returns leftover positional args.
  std::vector<std::string> apply_flags(const std::vector<std::string>& args);

  const std::string& str(const std::string& key) const;
  std::int64_t i64(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  double f64(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<std::int64_t> i64_list(const std::string& key) const;  // comma separated
  std::vector<std::string> str_list(const std::string& key) const;

  void write_snapshot(const std::string& path) const;
  std::string snapshot_text() const;

 private:
  std::string resolve(const std::string& name) const;  // bare-name disambiguation
  std::map<std::string, std::string> values_;          // "section.key" -> value
  std::vector<std::string> order_;
};

}  // namespace dm
