#include "dualmind/env.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dm {

namespace {

struct rgb {
  std::uint8_t r, g, b;
};

// Same first five entries as the GridNav landmark palette / vocabulary order.
constexpr rgb kBlockPalette[kReachColors] = {
    {220, 60, 60},   // red
    {60, 200, 80},   // green
    {70, 110, 230},  // blue
    {230, 220, 70},  // yellow
    {160, 80, 200},  // purple
};
constexpr rgb kBackground = {25, 25, 25};
constexpr rgb kZone = {90, 90, 90};
constexpr rgb kEffector = {255, 255, 255};

double dist2d(double ax, double ay, double bx, double by) {
  return std::hypot(ax - bx, ay - by);
}

// Unit coordinate -> pixel center on the 64px canvas.
int px(double p) { return 3 + int(std::lround(p * 57.0)); }

void draw_square(image& img, double x, double y, int half, rgb c) {
  img.fill_rect(px(y) - half, px(x) - half, 2 * half + 1, 2 * half + 1, c.r, c.g, c.b);
}

}  // namespace

std::string reachbin_task::text() const {
  const auto& words = default_vocab_words();
  const std::string& c = words[std::size_t(color)];
  return push ? "push " + c + " block to the zone" : "reach the " + c + " target";
}

reachbin_env reachbin_env::make(std::uint64_t seed, bool push, int color) {
  check(color >= 0 && color < kReachColors,
        "reachbin: color " + std::to_string(color) + " outside [0," +
            std::to_string(kReachColors) + ")");
  seed_splitter split(seed);
  rng r = split.stream("reachbin.task", std::uint64_t(color) * 2 + (push ? 1 : 0));

  reachbin_task t;
  t.seed = seed;
  t.push = push;
  t.color = color;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    t.target_x = r.uniform(0.15, 0.85);
    t.target_y = r.uniform(0.15, 0.85);
    t.start_x = r.uniform(0.15, 0.85);
    t.start_y = r.uniform(0.15, 0.85);
    const bool apart = dist2d(t.start_x, t.start_y, t.target_x, t.target_y) >= 0.25;
    const bool solvable =
        !push || dist2d(t.target_x, t.target_y, t.zone_x, t.zone_y) >= 0.25;
    if (apart && solvable) break;
    check(attempt + 1 < 1000, "reachbin: layout sampling failed");
  }
  t.distractors.clear();
  while (int(t.distractors.size()) < 2) {
    const double x = r.uniform(0.1, 0.9), y = r.uniform(0.1, 0.9);
    const int c = int(r.below(kReachColors));
    if (c == color) continue;
    if (dist2d(x, y, t.target_x, t.target_y) < 0.12) continue;
    t.distractors.push_back({x, y, double(c)});
  }

  reachbin_env env;
  env.t_ = t;
  env.reset();
  return env;
}

void reachbin_env::reset() {
  ex_ = t_.start_x;
  ey_ = t_.start_y;
  bx_ = t_.target_x;
  by_ = t_.target_y;
  done_ = false;
  steps_ = 0;
}

double reachbin_env::distance_to_goal() const {
  return t_.push ? dist2d(bx_, by_, t_.zone_x, t_.zone_y) : dist2d(ex_, ey_, bx_, by_);
}

task_prompt reachbin_env::prompt() const {
  task_prompt p;
  p.kind = prompt_kind::language;
  p.text = t_.text();
  return p;
}

image reachbin_env::render() const {
  image img = image::make(64, 64, 3, 0);
  img.fill_rect(0, 0, 64, 64, kBackground.r, kBackground.g, kBackground.b);
  if (t_.push) draw_square(img, t_.zone_x, t_.zone_y, 5, kZone);
  for (const auto& d : t_.distractors)
    draw_square(img, d[0], d[1], 3, kBlockPalette[int(d[2])]);
  draw_square(img, bx_, by_, 3, kBlockPalette[t_.color]);
  draw_square(img, ex_, ey_, 2, kEffector);
  return img;
}

step_result reachbin_env::step(std::array<double, 2> action) {
  check(!done_, "reachbin: episode finished; reset before stepping again");
  check(std::isfinite(action[0]) && std::isfinite(action[1]),
        "reachbin: action components must be finite");
  const double dx = std::clamp(action[0], -1.0, 1.0) * t_.delta;
  const double dy = std::clamp(action[1], -1.0, 1.0) * t_.delta;
  ex_ = std::clamp(ex_ + dx, 0.0, 1.0);
  ey_ = std::clamp(ey_ + dy, 0.0, 1.0);
  if (t_.push) {
    // Rigid-disk contact: an effector overlapping the contact radius shoves
    // the block radially outward until they are exactly `contact` apart.
    const double d = dist2d(ex_, ey_, bx_, by_);
    if (d < t_.contact) {
      double ux, uy;
      if (d > 1e-9) {
        ux = (bx_ - ex_) / d;
        uy = (by_ - ey_) / d;
      } else {  // dead-center overlap: push along the motion direction
        const double m = std::hypot(dx, dy);
        ux = m > 1e-12 ? dx / m : 1.0;
        uy = m > 1e-12 ? dy / m : 0.0;
      }
      bx_ = std::clamp(ex_ + ux * t_.contact, 0.0, 1.0);
      by_ = std::clamp(ey_ + uy * t_.contact, 0.0, 1.0);
    }
  }
  ++steps_;

  step_result res;
  res.distance_to_goal = distance_to_goal();
  res.success = res.distance_to_goal <= t_.eps;
  res.reward = -res.distance_to_goal + (res.success ? kSuccessBonus : 0.0);
  if (res.success || steps_ >= kStepCap) done_ = true;
  res.done = done_;
  res.path_length = steps_;
  res.observation = render();
  return res;
}

std::array<double, 2> reachbin_env::expert_action() const {
  check(!done_, "reachbin expert: episode already finished");
  if (!t_.push) {  // straight proportional control onto the target
    return {std::clamp((bx_ - ex_) / t_.delta, -1.0, 1.0),
            std::clamp((by_ - ey_) / t_.delta, -1.0, 1.0)};
  }
  const double zx = t_.zone_x - bx_, zy = t_.zone_y - by_;
  const double dz = std::hypot(zx, zy);
  const double ux = zx / dz, uy = zy / dz;  // plow direction (dz > eps while running)
  // Staging point just behind the block relative to the zone.
  const double sx = bx_ - ux * t_.contact * 0.9;
  const double sy = by_ - uy * t_.contact * 0.9;
  if (dist2d(ex_, ey_, sx, sy) > 0.02) {  // get behind the block first
    return {std::clamp((sx - ex_) / t_.delta, -1.0, 1.0),
            std::clamp((sy - ey_) / t_.delta, -1.0, 1.0)};
  }
  // Plow at reduced speed so the effector never leapfrogs the block.
  const double speed = std::min(0.5, dz / t_.delta);
  return {ux * speed, uy * speed};
}

std::vector<std::array<double, 2>> reachbin_expert(const reachbin_env& env) {
  reachbin_env sim = env;
  sim.reset();
  std::vector<std::array<double, 2>> actions;
  while (!sim.done()) {
    const auto a = sim.expert_action();
    actions.push_back(a);
    sim.step(a);
  }
  return actions;
}

action_spec reachbin_action_spec() {
  action_spec s;
  s.domain = "reachbin";
  s.discrete = false;
  s.lo = {-1.0, -1.0};
  s.hi = {1.0, 1.0};
  return s;
}

bool reachbin_combo_heldout(bool push, int color) {
  if (color == 3 || color == 4) return true;  // yellow/purple unseen in training
  return push && color == 0;                  // plus push-red
}

}  // namespace dm
