#pragma once
// Episode-level evaluation metrics and the serializable evaluation report.

#include <string>
#include <vector>

namespace dm {

struct eval_episode {
  std::string task;             // e.g. "gridnav/easy/family0/seed42"
  bool success = false;
  int path_length = 0;          // p: executed path (forward moves / env steps)
  int shortest_length = 0;      // l: geodesic lower bound (navigation; must be > 0 there)
  double episode_return = 0.0;  // summed reward R
};

// Fraction of successful episodes.
double metric_success_rate(const std::vector<eval_episode>& records);

// Success weighted by path length: (1/N) sum S_i * l_i / max(p_i, l_i).
// Every record must have shortest_length > 0. Termwise <= S_i, so SPL <= SR.
double metric_spl(const std::vector<eval_episode>& records);

// Best window-mean over the expert returns: max_j mean(returns[j .. j+window-1]),
// j in [0, N-window]. Requires N >= window >= 1.
double metric_expert_score(const std::vector<double>& returns, int window);

// 100 * agent mean return / expert reference.
double percentage_expert_score(double agent_mean_return, double reference);

// Tasks-at-or-above-threshold counts for the per-task score list.
struct threshold_point {
  double threshold = 0.0;
  int count = 0;
};
std::vector<threshold_point> threshold_curve(const std::vector<double>& task_scores,
                                             const std::vector<double>& thresholds);
std::string threshold_curve_csv(const std::vector<threshold_point>& curve);

struct eval_report {
  std::vector<eval_episode> episodes;

  double success_rate = 0.0;
  bool has_spl = false;  // navigation reports only
  double spl = 0.0;
  double mean_return = 0.0;
  double min_return = 0.0;
  double max_return = 0.0;
  bool has_expert_reference = false;
  double expert_reference = 0.0;
  double percentage_expert = 0.0;
};

// Computes all aggregates. `navigation` turns on SPL (and validates shortest
// lengths); a non-empty expert return list adds the percentage-expert score.
eval_report make_eval_report(std::vector<eval_episode> episodes, bool navigation,
                             const std::vector<double>& expert_returns = {},
                             int expert_window = 10);

std::string eval_report_json(const eval_report& report);
void save_eval_report(const eval_report& report, const std::string& path);

}  // namespace dm
