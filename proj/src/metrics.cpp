#include "dualmind/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

#include "dualmind/autodiff.hpp"  // dm::check
#include "json.hpp"

namespace dm {

double metric_success_rate(const std::vector<eval_episode>& records) {
  check(!records.empty(), "success rate: no episodes");
  double s = 0;
  for (const auto& r : records) s += r.success ? 1.0 : 0.0;
  return s / double(records.size());
}

double metric_spl(const std::vector<eval_episode>& records) {
  check(!records.empty(), "spl: no episodes");
  double total = 0;
  for (const auto& r : records) {
    check(r.shortest_length > 0, "spl: episode '" + r.task +
                                     "' has non-positive shortest path length");
    const double l = double(r.shortest_length);
    const double p = double(r.path_length);
    total += (r.success ? 1.0 : 0.0) * l / std::max(p, l);
  }
  return total / double(records.size());
}

double metric_expert_score(const std::vector<double>& returns, int window) {
  check(window >= 1, "expert score: window must be >= 1");
  check(int(returns.size()) >= window,
        "expert score: need at least " + std::to_string(window) + " episodes, have " +
            std::to_string(returns.size()));
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j + std::size_t(window) <= returns.size(); ++j) {
    double sum = 0;
    for (int i = 0; i < window; ++i) sum += returns[j + std::size_t(i)];
    best = std::max(best, sum / double(window));
  }
  return best;
}

double percentage_expert_score(double agent_mean_return, double reference) {
  check(reference != 0.0, "percentage expert score: zero reference");
  return 100.0 * agent_mean_return / reference;
}

std::vector<threshold_point> threshold_curve(const std::vector<double>& task_scores,
                                             const std::vector<double>& thresholds) {
  std::vector<threshold_point> curve;
  curve.reserve(thresholds.size());
  for (double t : thresholds) {
    int count = 0;
    for (double s : task_scores)
      if (s >= t) ++count;
    curve.push_back({t, count});
  }
  return curve;
}

std::string threshold_curve_csv(const std::vector<threshold_point>& curve) {
  std::ostringstream os;
  os.precision(17);
  os << "threshold,count\n";
  for (const auto& p : curve) os << p.threshold << ',' << p.count << '\n';
  return os.str();
}

eval_report make_eval_report(std::vector<eval_episode> episodes, bool navigation,
                             const std::vector<double>& expert_returns,
                             int expert_window) {
  eval_report rep;
  rep.episodes = std::move(episodes);
  rep.success_rate = metric_success_rate(rep.episodes);
  if (navigation) {
    rep.has_spl = true;
    rep.spl = metric_spl(rep.episodes);
  }
  rep.min_return = std::numeric_limits<double>::infinity();
  rep.max_return = -std::numeric_limits<double>::infinity();
  double sum = 0;
  for (const auto& e : rep.episodes) {
    sum += e.episode_return;
    rep.min_return = std::min(rep.min_return, e.episode_return);
    rep.max_return = std::max(rep.max_return, e.episode_return);
  }
  rep.mean_return = sum / double(rep.episodes.size());
  if (!expert_returns.empty()) {
    rep.has_expert_reference = true;
    rep.expert_reference = metric_expert_score(expert_returns, expert_window);
    rep.percentage_expert = percentage_expert_score(rep.mean_return, rep.expert_reference);
  }
  return rep;
}

std::string eval_report_json(const eval_report& report) {
  nlohmann::json j;
  j["episodes"] = nlohmann::json::array();
  for (const auto& e : report.episodes) {
    j["episodes"].push_back({{"task", e.task},
                             {"success", e.success},
                             {"path_length", e.path_length},
                             {"shortest_length", e.shortest_length},
                             {"return", e.episode_return}});
  }
  nlohmann::json agg;
  agg["episodes"] = report.episodes.size();
  agg["success_rate"] = report.success_rate;
  if (report.has_spl) agg["spl"] = report.spl;
  agg["mean_return"] = report.mean_return;
  agg["min_return"] = report.min_return;
  agg["max_return"] = report.max_return;
  if (report.has_expert_reference) {
    agg["expert_reference"] = report.expert_reference;
    agg["percentage_expert_score"] = report.percentage_expert;
  }
  j["aggregates"] = agg;
  return j.dump(2) + "\n";
}

void save_eval_report(const eval_report& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  check(bool(out), "eval report: cannot write " + path);
  out << eval_report_json(report);
  check(bool(out), "eval report: write failed for " + path);
}

}  // namespace dm
