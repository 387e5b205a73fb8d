#include "dualmind/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dm {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

}  // namespace

void config::declare(const std::string& key, const std::string& default_value) {
  if (!values_.count(key)) order_.push_back(key);
  values_[key] = default_value;
}

bool config::known(const std::string& key) const { return values_.count(key) > 0; }

std::string config::resolve(const std::string& name) const {
  if (values_.count(name)) return name;
  std::string hit;
  for (const auto& [k, v] : values_) {
    (void)v;
    const auto dot = k.rfind('.');
    if (dot != std::string::npos && k.substr(dot + 1) == name) {
      if (!hit.empty()) fail("config: flag '" + name + "' is ambiguous (" + hit + ", " + k + ")");
      hit = k;
    }
  }
  if (hit.empty()) {
    std::string known_keys;
    for (const auto& k : order_) known_keys += (known_keys.empty() ? "" : ", ") + k;
    fail("config: unknown key '" + name + "' (known: " + known_keys + ")");
  }
  return hit;
}

void config::set(const std::string& key, const std::string& value) {
  values_[resolve(key)] = value;
}

void config::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail("config: cannot open " + path);
  std::string line, section;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("config: malformed section at " + path + ":" + std::to_string(lineno));
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail("config: expected key=value at " + path + ":" + std::to_string(lineno));
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    const std::string full = section.empty() ? key : section + "." + key;
    if (!values_.count(full)) fail("config: unknown key '" + full + "' at " + path + ":" +
                                   std::to_string(lineno));
    values_[full] = val;
  }
}

std::vector<std::string> config::apply_flags(const std::vector<std::string>& args) {
  std::vector<std::string> leftover;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0) {
      leftover.push_back(a);
      continue;
    }
    std::string body = a.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      set(body.substr(0, eq), body.substr(eq + 1));
    } else {
      if (i + 1 >= args.size()) fail("config: flag --" + body + " is missing a value");
      set(body, args[++i]);
    }
  }
  return leftover;
}

const std::string& config::str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) fail("config: undeclared key '" + key + "'");
  return it->second;
}

std::int64_t config::i64(const std::string& key) const {
  const std::string& v = str(key);
  try {
    std::size_t pos = 0;
    const std::int64_t out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return out;
  } catch (...) {
    fail("config: key '" + key + "' = '" + v + "' is not an integer");
  }
}

std::uint64_t config::u64(const std::string& key) const {
  const std::string& v = str(key);
  try {
    std::size_t pos = 0;
    const std::uint64_t out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return out;
  } catch (...) {
    fail("config: key '" + key + "' = '" + v + "' is not an unsigned integer");
  }
}

double config::f64(const std::string& key) const {
  const std::string& v = str(key);
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return out;
  } catch (...) {
    fail("config: key '" + key + "' = '" + v + "' is not a number");
  }
}

bool config::flag(const std::string& key) const {
  const std::string& v = str(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail("config: key '" + key + "' = '" + v + "' is not a boolean");
}

std::vector<std::string> config::str_list(const std::string& key) const {
  std::vector<std::string> out;
  std::stringstream ss(str(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::int64_t> config::i64_list(const std::string& key) const {
  std::vector<std::int64_t> out;
  for (const auto& s : str_list(key)) {
    try {
      out.push_back(std::stoll(s));
    } catch (...) {
      fail("config: key '" + key + "' contains non-integer '" + s + "'");
    }
  }
  return out;
}

std::string config::snapshot_text() const {
  // sections sorted, keys sorted inside each: deterministic bytes
  std::map<std::string, std::map<std::string, std::string>> grouped;
  for (const auto& [k, v] : values_) {
    const auto dot = k.rfind('.');
    if (dot == std::string::npos)
      grouped[""][k] = v;
    else
      grouped[k.substr(0, dot)][k.substr(dot + 1)] = v;
  }
  std::ostringstream o;
  for (const auto& [sec, kvs] : grouped) {
    if (!sec.empty()) o << "[" << sec << "]\n";
    for (const auto& [k, v] : kvs) o << k << "=" << v << "\n";
  }
  return o.str();
}

void config::write_snapshot(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail("config: cannot write snapshot " + path);
  f << snapshot_text();
}

}  // namespace dm
