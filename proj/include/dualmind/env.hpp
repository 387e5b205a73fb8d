#pragma once
// Two synthetic control domains with scripted experts.
//
// GridNav: seeded occupancy mazes on an N x N grid, egocentric heading-up
// 64x64 RGB observations, discrete actions {forward, left, right, stop},
// sparse reward (+1 for stopping within one cell of the goal), and a BFS
// shortest-path expert. Ten generator families (0-4 training, 5-9 held out)
// vary wall density, wall style, and landmark palette.
//
// ReachBin: a unit-square workspace with colored blocks, continuous actions
// in [-1,1]^2 scaled by a step size, language-template prompts ("reach the
// <color> target" / "push <color> block to the zone"), shaped reward, and a
// proportional-controller expert.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dualmind/image.hpp"
#include "dualmind/rng.hpp"
#include "dualmind/tokenize.hpp"

namespace dm {

struct step_result {
  image observation;
  double reward = 0.0;
  bool done = false;
  bool success = false;
  double distance_to_goal = 0.0;  // geodesic cells (GridNav) / euclidean (ReachBin)
  int path_length = 0;            // executed forwards (GridNav) / steps (ReachBin)
};

// Shared word list: color names first (object ids index into them), then the
// words used by the ReachBin language templates.
const std::vector<std::string>& default_vocab_words();
prompt_vocab default_vocab();

// --------------------------------------------------------------- GridNav ---
enum class nav_band { easy, medium, hard };
nav_band nav_band_from_string(const std::string& s);
std::string to_string(nav_band b);
// Geodesic bands in cells: easy [2,4], medium [5,8], hard [9,16].
std::array<int, 2> nav_band_range(nav_band b);

struct gridnav_task {
  int n = 9;
  std::uint64_t seed = 0;
  int family = 0;
  nav_band band = nav_band::easy;
  prompt_kind kind = prompt_kind::goal_image;
  std::vector<std::uint8_t> walls;  // n*n, 1 = wall
  struct landmark {
    int y = 0, x = 0;
    int color = 0;  // palette / vocabulary index
  };
  std::vector<landmark> landmarks;
  int goal_landmark = 0;  // index into landmarks; its cell is the goal
  int start_y = 0, start_x = 0, start_heading = 0;
  int goal_y = 0, goal_x = 0;
  int geodesic = 0;  // BFS distance from start to goal

  bool wall(int y, int x) const {
    return y < 0 || y >= n || x < 0 || x >= n || walls[std::size_t(y * n + x)] != 0;
  }
};

class gridnav_env {
 public:
  static constexpr int kForward = 0, kLeft = 1, kRight = 2, kStop = 3;
  static constexpr int kActions = 4;
  static constexpr int kFamilies = 10, kTrainFamilies = 5;

  // Deterministic task generation; throws if no task in the band fits.
  static gridnav_env make(std::uint64_t seed, int family, nav_band band, prompt_kind kind);
  // Wraps an explicit layout (start/goal must sit on connected floor cells).
  static gridnav_env from_task(gridnav_task t);

  const gridnav_task& task() const { return t_; }
  task_prompt prompt() const;
  image render() const { return render_at(y_, x_, heading_); }
  image render_at(int y, int x, int heading) const;  // pure
  step_result step(int action);
  void reset();  // back to the task's start pose

  bool done() const { return done_; }
  int step_cap() const { return 4 * t_.n * t_.n; }
  int position_y() const { return y_; }
  int position_x() const { return x_; }
  int heading() const { return heading_; }
  int path_length() const { return path_len_; }
  // Geodesic distance from (y, x) to the goal; -1 if unreachable.
  int distance_from(int y, int x) const;

 private:
  gridnav_task t_;
  std::vector<int> dist_;  // BFS distance-to-goal map
  int y_ = 0, x_ = 0, heading_ = 0;
  bool done_ = false;
  int path_len_ = 0;
  int steps_ = 0;
};

// Shortest-path demonstration: walks the BFS geodesic, then stops on the
// goal cell. Its forward count equals the geodesic distance by construction.
std::vector<int> gridnav_expert(const gridnav_env& env);
action_spec gridnav_action_spec();

// -------------------------------------------------------------- ReachBin ---
inline constexpr int kReachColors = 5;  // red green blue yellow purple

struct reachbin_task {
  std::uint64_t seed = 0;
  bool push = false;  // false: reach template, true: push template
  int color = 0;      // 0..kReachColors-1
  double target_x = 0, target_y = 0;  // target (reach) / block (push) start
  std::vector<std::array<double, 3>> distractors;  // x, y, color
  double zone_x = 0.8, zone_y = 0.8;  // push destination
  double eps = 0.05;
  double delta = 0.08;  // per-step movement scale
  double contact = 0.06;
  double start_x = 0, start_y = 0;

  std::string text() const;  // the full language prompt
};

class reachbin_env {
 public:
  static constexpr int kStepCap = 60;
  static constexpr double kSuccessBonus = 5.0;

  static reachbin_env make(std::uint64_t seed, bool push, int color);

  const reachbin_task& task() const { return t_; }
  task_prompt prompt() const;
  image render() const;
  step_result step(std::array<double, 2> action);
  void reset();

  // One proportional-controller step toward the current subgoal.
  std::array<double, 2> expert_action() const;

  bool done() const { return done_; }
  double effector_x() const { return ex_; }
  double effector_y() const { return ey_; }
  double block_x() const { return bx_; }
  double block_y() const { return by_; }
  double distance_to_goal() const;  // task predicate distance
  int steps_taken() const { return steps_; }

 private:
  reachbin_task t_;
  double ex_ = 0, ey_ = 0;  // effector
  double bx_ = 0, by_ = 0;  // pushed block (tracks target for reach tasks)
  bool done_ = false;
  int steps_ = 0;
};

// Proportional controller: straight to the target, or to the block and then
// to the zone for push tasks. Action stream ends when the predicate is met.
std::vector<std::array<double, 2>> reachbin_expert(const reachbin_env& env);
action_spec reachbin_action_spec();

// Template/color combinations held out for the OOD protocol (5 of 10).
bool reachbin_combo_heldout(bool push, int color);

}  // namespace dm
