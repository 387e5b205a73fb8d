#include "dualmind/env.hpp"

#include <algorithm>
#include <deque>
#include <stdexcept>

namespace dm {

namespace {

struct rgb {
  std::uint8_t r, g, b;
};

constexpr rgb kPalette[8] = {
    {220, 60, 60},   // red
    {60, 200, 80},   // green
    {70, 110, 230},  // blue
    {230, 220, 70},  // yellow
    {160, 80, 200},  // purple
    {240, 150, 50},  // orange
    {70, 210, 210},  // cyan
    {220, 70, 180},  // magenta
};
constexpr rgb kFloor = {200, 200, 200};
constexpr rgb kWall = {45, 45, 45};

constexpr int kViewRadius = 3;  // 7x7 visible cells
constexpr int kCellPx = 9;      // 7*9 = 63, centered in the 64px canvas

// Heading: 0 = north (-y), 1 = east (+x), 2 = south (+y), 3 = west (-x).
constexpr int kDy[4] = {-1, 0, 1, 0};
constexpr int kDx[4] = {0, 1, 0, -1};

std::vector<int> bfs_from(const gridnav_task& t, int gy, int gx) {
  std::vector<int> dist(std::size_t(t.n) * t.n, -1);
  std::deque<std::pair<int, int>> q;
  dist[std::size_t(gy * t.n + gx)] = 0;
  q.emplace_back(gy, gx);
  while (!q.empty()) {
    auto [y, x] = q.front();
    q.pop_front();
    for (int d = 0; d < 4; ++d) {
      const int ny = y + kDy[d], nx = x + kDx[d];
      if (t.wall(ny, nx) || dist[std::size_t(ny * t.n + nx)] >= 0) continue;
      dist[std::size_t(ny * t.n + nx)] = dist[std::size_t(y * t.n + x)] + 1;
      q.emplace_back(ny, nx);
    }
  }
  return dist;
}

int landmark_at(const gridnav_task& t, int y, int x) {
  for (std::size_t i = 0; i < t.landmarks.size(); ++i)
    if (t.landmarks[i].y == y && t.landmarks[i].x == x) return int(i);
  return -1;
}

}  // namespace

const std::vector<std::string>& default_vocab_words() {
  static const std::vector<std::string> words = {
      "red",  "green", "blue", "yellow", "purple", "orange", "cyan", "magenta",
      "reach", "push",  "the",  "target", "block",  "to",     "zone"};
  return words;
}

prompt_vocab default_vocab() { return prompt_vocab::from_words(default_vocab_words()); }

nav_band nav_band_from_string(const std::string& s) {
  if (s == "easy") return nav_band::easy;
  if (s == "medium") return nav_band::medium;
  if (s == "hard") return nav_band::hard;
  throw std::invalid_argument("unknown difficulty band '" + s +
                              "' (want easy, medium, or hard)");
}

std::string to_string(nav_band b) {
  switch (b) {
    case nav_band::easy: return "easy";
    case nav_band::medium: return "medium";
    case nav_band::hard: return "hard";
  }
  return "easy";
}

std::array<int, 2> nav_band_range(nav_band b) {
  switch (b) {
    case nav_band::easy: return {2, 4};
    case nav_band::medium: return {5, 8};
    case nav_band::hard: return {9, 16};
  }
  return {2, 4};
}

gridnav_env gridnav_env::make(std::uint64_t seed, int family, nav_band band, prompt_kind kind) {
  check(family >= 0 && family < kFamilies,
        "gridnav: family " + std::to_string(family) + " outside [0," +
            std::to_string(kFamilies) + ")");
  check(kind == prompt_kind::goal_image || kind == prompt_kind::object_id,
        "gridnav supports goal-image and object-id prompts only");
  seed_splitter split(seed);
  rng r = split.stream("gridnav.task",
                       std::uint64_t(family) * 16 + std::uint64_t(int(band)) * 4 +
                           (kind == prompt_kind::goal_image ? 0 : 1));
  const int n = 9;
  const auto range = nav_band_range(band);
  const double density = 0.08 + 0.02 * family;

  for (int attempt = 0; attempt < 1000; ++attempt) {
    gridnav_task t;
    t.n = n;
    t.seed = seed;
    t.family = family;
    t.band = band;
    t.kind = kind;
    t.walls.assign(std::size_t(n) * n, 0);
    for (int i = 0; i < n; ++i) {
      t.walls[std::size_t(i)] = 1;                // top row
      t.walls[std::size_t((n - 1) * n + i)] = 1;  // bottom row
      t.walls[std::size_t(i * n)] = 1;            // left column
      t.walls[std::size_t(i * n + n - 1)] = 1;    // right column
    }
    if (family % 2 == 0) {
      // Scatter style: independent wall cells.
      for (int y = 1; y < n - 1; ++y)
        for (int x = 1; x < n - 1; ++x)
          if (r.bernoulli(density)) t.walls[std::size_t(y * n + x)] = 1;
    } else {
      // Segment style: short straight wall runs.
      const int segments = int(density * (n - 2) * (n - 2) / 3.0 + 0.5);
      for (int s = 0; s < segments; ++s) {
        const int y = 1 + int(r.below(std::uint64_t(n - 2)));
        const int x = 1 + int(r.below(std::uint64_t(n - 2)));
        const bool horiz = r.bernoulli(0.5);
        for (int k = 0; k < 3; ++k) {
          const int yy = horiz ? y : y + k, xx = horiz ? x + k : x;
          if (yy >= 1 && yy < n - 1 && xx >= 1 && xx < n - 1)
            t.walls[std::size_t(yy * n + xx)] = 1;
        }
      }
    }

    // Three colored landmarks on distinct floor cells; palette by family.
    const int colors[3] = {family % 8, (family + 3) % 8, (family + 6) % 8};
    bool placed = true;
    for (int i = 0; i < 3 && placed; ++i) {
      placed = false;
      for (int tries = 0; tries < 100; ++tries) {
        const int y = 1 + int(r.below(std::uint64_t(n - 2)));
        const int x = 1 + int(r.below(std::uint64_t(n - 2)));
        if (t.wall(y, x) || landmark_at(t, y, x) >= 0) continue;
        t.landmarks.push_back({y, x, colors[i]});
        placed = true;
        break;
      }
    }
    if (!placed) continue;

    t.goal_landmark = int(r.below(3));
    t.goal_y = t.landmarks[std::size_t(t.goal_landmark)].y;
    t.goal_x = t.landmarks[std::size_t(t.goal_landmark)].x;
    auto dist = bfs_from(t, t.goal_y, t.goal_x);

    std::vector<std::pair<int, int>> candidates;
    for (int y = 1; y < n - 1; ++y)
      for (int x = 1; x < n - 1; ++x) {
        const int d = dist[std::size_t(y * n + x)];
        if (d >= range[0] && d <= range[1] && landmark_at(t, y, x) < 0)
          candidates.emplace_back(y, x);
      }
    if (candidates.empty()) continue;
    const auto [sy, sx] = candidates[std::size_t(r.below(candidates.size()))];
    t.start_y = sy;
    t.start_x = sx;
    t.start_heading = int(r.below(4));
    t.geodesic = dist[std::size_t(sy * n + sx)];

    gridnav_env env;
    env.t_ = std::move(t);
    env.dist_ = std::move(dist);
    env.reset();
    return env;
  }
  throw std::runtime_error("gridnav: no solvable task in band " + to_string(band) +
                           " for family " + std::to_string(family) + ", seed " +
                           std::to_string(seed));
}

gridnav_env gridnav_env::from_task(gridnav_task t) {
  check(t.n >= 3, "gridnav: grid side must be at least 3");
  check(int(t.walls.size()) == t.n * t.n, "gridnav: wall grid size mismatch");
  check(!t.wall(t.goal_y, t.goal_x), "gridnav: goal sits on a wall");
  check(!t.wall(t.start_y, t.start_x), "gridnav: start sits on a wall");
  gridnav_env env;
  env.dist_ = bfs_from(t, t.goal_y, t.goal_x);
  env.t_ = std::move(t);
  check(env.dist_[std::size_t(env.t_.start_y * env.t_.n + env.t_.start_x)] >= 0,
        "gridnav: start disconnected from goal");
  env.t_.geodesic = env.dist_[std::size_t(env.t_.start_y * env.t_.n + env.t_.start_x)];
  env.reset();
  return env;
}

void gridnav_env::reset() {
  y_ = t_.start_y;
  x_ = t_.start_x;
  heading_ = t_.start_heading;
  done_ = false;
  path_len_ = 0;
  steps_ = 0;
}

task_prompt gridnav_env::prompt() const {
  task_prompt p;
  p.kind = t_.kind;
  if (t_.kind == prompt_kind::goal_image)
    p.img = render_at(t_.goal_y, t_.goal_x, 0);
  else
    p.object = t_.landmarks[std::size_t(t_.goal_landmark)].color;
  return p;
}

image gridnav_env::render_at(int y, int x, int heading) const {
  image img = image::make(64, 64, 3, 0);
  for (int vy = 0; vy < 2 * kViewRadius + 1; ++vy)
    for (int vx = 0; vx < 2 * kViewRadius + 1; ++vx) {
      const int f = kViewRadius - vy;  // cells ahead
      const int l = vx - kViewRadius;  // cells to the right
      int dy = 0, dx = 0;
      switch (heading & 3) {
        case 0: dy = -f, dx = l; break;   // north
        case 1: dy = l, dx = f; break;    // east
        case 2: dy = f, dx = -l; break;   // south
        case 3: dy = -l, dx = -f; break;  // west
      }
      const int cy = y + dy, cx = x + dx;
      rgb c = kFloor;
      if (t_.wall(cy, cx)) {
        c = kWall;
      } else {
        const int lm = landmark_at(t_, cy, cx);
        if (lm >= 0) c = kPalette[t_.landmarks[std::size_t(lm)].color & 7];
      }
      img.fill_rect(1 + vy * kCellPx, 1 + vx * kCellPx, kCellPx, kCellPx, c.r, c.g, c.b);
    }
  return img;
}

int gridnav_env::distance_from(int y, int x) const {
  if (y < 0 || y >= t_.n || x < 0 || x >= t_.n) return -1;
  return dist_[std::size_t(y * t_.n + x)];
}

step_result gridnav_env::step(int action) {
  check(!done_, "gridnav: episode finished; reset before stepping again");
  check(action >= 0 && action < kActions,
        "gridnav: action " + std::to_string(action) + " outside [0,4)");
  ++steps_;
  if (action == kLeft) {
    heading_ = (heading_ + 3) & 3;
  } else if (action == kRight) {
    heading_ = (heading_ + 1) & 3;
  } else if (action == kForward) {
    const int ny = y_ + kDy[heading_], nx = x_ + kDx[heading_];
    if (!t_.wall(ny, nx)) {
      y_ = ny;
      x_ = nx;
      ++path_len_;
    }
  }
  step_result res;
  if (action == kStop) {
    done_ = true;
    const int manhattan = std::abs(y_ - t_.goal_y) + std::abs(x_ - t_.goal_x);
    res.success = manhattan <= 1;
    res.reward = res.success ? 1.0 : 0.0;
  } else if (steps_ >= step_cap()) {
    done_ = true;
  }
  res.done = done_;
  res.path_length = path_len_;
  res.distance_to_goal = double(distance_from(y_, x_));
  res.observation = render();
  return res;
}

std::vector<int> gridnav_expert(const gridnav_env& env) {
  const auto& t = env.task();
  int y = t.start_y, x = t.start_x, h = t.start_heading;
  check(env.distance_from(y, x) >= 0, "gridnav expert: start disconnected from goal");
  std::vector<int> actions;
  while (env.distance_from(y, x) > 0) {
    int dir = -1;
    for (int d = 0; d < 4; ++d) {
      const int ny = y + kDy[d], nx = x + kDx[d];
      if (!t.wall(ny, nx) && env.distance_from(ny, nx) == env.distance_from(y, x) - 1) {
        dir = d;
        break;
      }
    }
    check(dir >= 0, "gridnav expert: no descending neighbor (corrupt distance map)");
    const int turn = (dir - h + 4) & 3;
    if (turn == 1) {
      actions.push_back(gridnav_env::kRight);
    } else if (turn == 3) {
      actions.push_back(gridnav_env::kLeft);
    } else if (turn == 2) {
      actions.push_back(gridnav_env::kRight);
      actions.push_back(gridnav_env::kRight);
    }
    h = dir;
    actions.push_back(gridnav_env::kForward);
    y += kDy[dir];
    x += kDx[dir];
  }
  actions.push_back(gridnav_env::kStop);
  return actions;
}

action_spec gridnav_action_spec() {
  action_spec s;
  s.domain = "gridnav";
  s.discrete = true;
  s.cardinality = gridnav_env::kActions;
  return s;
}

}  // namespace dm
