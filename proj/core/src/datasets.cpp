#include "gatsbi/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "gatsbi/common.hpp"

namespace gatsbi {

namespace fs = std::filesystem;

void BallsParams::validate() const {
    require(n_balls >= 1, "need at least one ball");
    require(episodes >= 1 && steps >= 2, "need at least one episode of two frames");
    require(image_hw >= 8, "frame side too small");
    require(radius_min > 0 && radius_min <= radius_max && radius_max < 0.5,
            "radii must satisfy 0 < min <= max < half the arena");
    require(speed_min > 0 && speed_min <= speed_max, "speeds must satisfy 0 < min <= max");
}

void PushParams::validate() const {
    require(n_objects >= 0, "object count cannot be negative");
    require(episodes >= 1 && steps >= 2, "need at least one episode of two frames");
    require(image_hw >= 8, "frame side too small");
    require(agent_half > 0 && agent_half < 0.5, "agent box must fit the arena");
    require(disc_radius > 0 && disc_radius < 0.5, "discs must fit the arena");
    require(friction >= 0 && friction <= 1, "friction is a per-step decay fraction");
    require(action_scale >= 0, "action scale cannot be negative");
}

bool resolve_ball_pair(BallState& a, BallState& b) {
    const double dx = a.x - b.x, dy = a.y - b.y;
    const double d2 = dx * dx + dy * dy;
    const double rsum = a.radius + b.radius;
    if (d2 >= rsum * rsum) return false;

    const double d = std::sqrt(d2);
    const double ma = a.mass(), mb = b.mass();
    double nx = 1.0, ny = 0.0;
    if (d > 1e-12) {
        nx = dx / d;
        ny = dy / d;
    }
    // Push apart along the center line, weighted so the center of mass stays.
    const double overlap = rsum - d;
    const double wa = mb / (ma + mb), wb = ma / (ma + mb);
    a.x += nx * overlap * wa;
    a.y += ny * overlap * wa;
    b.x -= nx * overlap * wb;
    b.y -= ny * overlap * wb;

    // Impulse only for approaching pairs, so one event never double-fires.
    const double approach = (a.vx - b.vx) * dx + (a.vy - b.vy) * dy;
    if (approach >= 0.0 || d2 <= 0.0) return false;
    const double k = approach / d2;
    const double ja = 2.0 * mb / (ma + mb) * k;
    const double jb = 2.0 * ma / (ma + mb) * k;
    a.vx -= ja * dx;
    a.vy -= ja * dy;
    b.vx += jb * dx;
    b.vy += jb * dy;
    return true;
}

void resolve_walls(BallState& b, double arena) {
    const double r = b.radius;
    if (b.x < r) {
        b.x = 2.0 * r - b.x;
        b.vx = std::abs(b.vx);
    } else if (b.x > arena - r) {
        b.x = 2.0 * (arena - r) - b.x;
        b.vx = -std::abs(b.vx);
    }
    if (b.y < r) {
        b.y = 2.0 * r - b.y;
        b.vy = std::abs(b.vy);
    } else if (b.y > arena - r) {
        b.y = 2.0 * (arena - r) - b.y;
        b.vy = -std::abs(b.vy);
    }
}

int64_t step_balls(std::vector<BallState>& balls, double arena) {
    require(!balls.empty(), "no balls to step");
    double ke = 0.0, m_min = balls[0].mass(), r_min = balls[0].radius;
    for (const auto& b : balls) {
        ke += 0.5 * b.mass() * (b.vx * b.vx + b.vy * b.vy);
        m_min = std::min(m_min, b.mass());
        r_min = std::min(r_min, b.radius);
    }
    // Energy bounds any single speed, so substep displacements stay under
    // half the smallest radius and nothing tunnels through a contact.
    const double v_bound = std::sqrt(std::max(2.0 * ke / m_min, 0.0));
    const auto n_sub = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(v_bound / (0.5 * r_min))));
    const double h = 1.0 / static_cast<double>(n_sub);

    int64_t events = 0;
    for (int64_t s = 0; s < n_sub; ++s) {
        for (auto& b : balls) {
            b.x += b.vx * h;
            b.y += b.vy * h;
        }
        for (auto& b : balls) resolve_walls(b, arena);
        for (size_t i = 0; i < balls.size(); ++i)
            for (size_t j = i + 1; j < balls.size(); ++j)
                if (resolve_ball_pair(balls[i], balls[j])) ++events;
        // A pair push-out can nudge a ball past a wall; mirror it back.
        for (auto& b : balls) resolve_walls(b, arena);
    }
    return events;
}

torch::Tensor render_balls(const std::vector<BallState>& balls, int64_t image_hw,
                           double radius_min, double radius_max) {
    require(image_hw >= 1, "frame side must be positive");
    auto img = torch::zeros({3, image_hw, image_hw}, torch::kFloat32);
    auto acc = img.accessor<float, 3>();

    // Far to near: the radius doubles as depth, bigger means closer.
    std::vector<size_t> order(balls.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return balls[a].radius < balls[b].radius; });

    const double px = 1.0 / static_cast<double>(image_hw);
    for (size_t idx : order) {
        const auto& b = balls[idx];
        const double shade =
            radius_max > radius_min
                ? 0.45 + 0.55 * (b.radius - radius_min) / (radius_max - radius_min)
                : 1.0;
        const auto i0 = std::max<int64_t>(0, static_cast<int64_t>((b.y - b.radius) / px) - 1);
        const auto i1 = std::min(image_hw - 1, static_cast<int64_t>((b.y + b.radius) / px) + 1);
        const auto j0 = std::max<int64_t>(0, static_cast<int64_t>((b.x - b.radius) / px) - 1);
        const auto j1 = std::min(image_hw - 1, static_cast<int64_t>((b.x + b.radius) / px) + 1);
        for (int64_t i = i0; i <= i1; ++i) {
            const double cy = (static_cast<double>(i) + 0.5) * px;
            for (int64_t j = j0; j <= j1; ++j) {
                const double cx = (static_cast<double>(j) + 0.5) * px;
                const double d2 = (cx - b.x) * (cx - b.x) + (cy - b.y) * (cy - b.y);
                const double r2 = b.radius * b.radius;
                if (d2 > r2) continue;
                // Spherical dome: the center sits nearer than the rim.
                const double dome = std::sqrt(std::max(0.0, 1.0 - d2 / r2));
                const auto v = static_cast<float>(shade * (0.55 + 0.45 * dome));
                acc[0][i][j] = v;
                acc[1][i][j] = v;
                acc[2][i][j] = v;
            }
        }
    }
    return img;
}

namespace {

double scalar_uniform(RandomSource& rng, double lo, double hi) {
    return lo + (hi - lo) * rng.uniform({1}, torch::kFloat64).item<double>();
}

}  // namespace

std::vector<BallState> init_balls(const BallsParams& p, RandomSource& rng) {
    std::vector<BallState> out;
    out.reserve(static_cast<size_t>(p.n_balls));
    for (int64_t i = 0; i < p.n_balls; ++i) {
        BallState b;
        b.radius = scalar_uniform(rng, p.radius_min, p.radius_max);
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            b.x = scalar_uniform(rng, b.radius, 1.0 - b.radius);
            b.y = scalar_uniform(rng, b.radius, 1.0 - b.radius);
            placed = true;
            for (const auto& o : out) {
                const double dx = b.x - o.x, dy = b.y - o.y;
                const double rs = b.radius + o.radius;
                if (dx * dx + dy * dy < rs * rs) {
                    placed = false;
                    break;
                }
            }
        }
        if (!placed)
            throw Error("could not place ball " + std::to_string(i) +
                        " without overlap after 1000 rejection samples");
        const double speed = scalar_uniform(rng, p.speed_min, p.speed_max);
        const double ang = scalar_uniform(rng, 0.0, 2.0 * M_PI);
        b.vx = speed * std::cos(ang);
        b.vy = speed * std::sin(ang);
        out.push_back(b);
    }
    return out;
}

double min_separation(const PushWorldState& w) {
    double sep = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < w.discs.size(); ++i) {
        const auto& d = w.discs[i];
        // against the agent box: distance from the closest box point
        const double cx = std::clamp(d.x, w.agent_x - w.agent_half, w.agent_x + w.agent_half);
        const double cy = std::clamp(d.y, w.agent_y - w.agent_half, w.agent_y + w.agent_half);
        const double dist = std::hypot(d.x - cx, d.y - cy);
        sep = std::min(sep, dist - d.radius);
        // against the walls
        sep = std::min({sep, d.x - d.radius, d.y - d.radius, w.arena - d.radius - d.x,
                        w.arena - d.radius - d.y});
        for (size_t j = i + 1; j < w.discs.size(); ++j) {
            const auto& o = w.discs[j];
            sep = std::min(sep, std::hypot(d.x - o.x, d.y - o.y) - d.radius - o.radius);
        }
    }
    return sep;
}

namespace {

// Push one disc out of the agent box. Whatever displacement the arena walls
// refuse is transferred to the agent instead, so a disc cornered between the
// box and a wall stalls the pusher rather than staying interpenetrated.
// Returns the displacement the disc actually took.
std::pair<double, double> separate_box_disc(Disc& d, PushWorldState& w) {
    const double cx = std::clamp(d.x, w.agent_x - w.agent_half, w.agent_x + w.agent_half);
    const double cy = std::clamp(d.y, w.agent_y - w.agent_half, w.agent_y + w.agent_half);
    const double ddx = d.x - cx, ddy = d.y - cy;
    const double dist2 = ddx * ddx + ddy * ddy;

    double depth = 0.0, nx = 0.0, ny = 0.0;
    if (dist2 > 0.0) {
        const double dist = std::sqrt(dist2);
        if (dist >= d.radius) return {0.0, 0.0};
        depth = d.radius - dist;
        nx = ddx / dist;
        ny = ddy / dist;
    } else {
        // Center inside the box: exit through the nearest face.
        const double ex = w.agent_half + d.radius - std::abs(d.x - w.agent_x);
        const double ey = w.agent_half + d.radius - std::abs(d.y - w.agent_y);
        if (ex <= ey) {
            depth = ex;
            nx = (d.x >= w.agent_x ? 1.0 : -1.0);
        } else {
            depth = ey;
            ny = (d.y >= w.agent_y ? 1.0 : -1.0);
        }
    }

    d.x += nx * depth;
    d.y += ny * depth;
    const double lx = std::clamp(d.x, d.radius, w.arena - d.radius);
    const double ly = std::clamp(d.y, d.radius, w.arena - d.radius);
    const double refused_x = d.x - lx, refused_y = d.y - ly;
    d.x = lx;
    d.y = ly;
    if (refused_x != 0.0 || refused_y != 0.0) {
        w.agent_x = std::clamp(w.agent_x - refused_x, w.agent_half, w.arena - w.agent_half);
        w.agent_y = std::clamp(w.agent_y - refused_y, w.agent_half, w.arena - w.agent_half);
    }
    return {nx * depth - refused_x, ny * depth - refused_y};
}

}  // namespace

int64_t step_push(PushWorldState& w, double dx, double dy) {
    w.agent_x = std::clamp(w.agent_x + dx, w.agent_half, w.arena - w.agent_half);
    w.agent_y = std::clamp(w.agent_y + dy, w.agent_half, w.arena - w.agent_half);
    for (auto& d : w.discs) {
        d.x += d.vx;
        d.y += d.vy;
    }

    std::vector<bool> touched(w.discs.size(), false);
    for (int iter = 0; iter < 50; ++iter) {
        bool moved = false;
        for (size_t i = 0; i < w.discs.size(); ++i) {
            const double ax0 = w.agent_x, ay0 = w.agent_y;
            auto [px, py] = separate_box_disc(w.discs[i], w);
            if (px != 0.0 || py != 0.0 || w.agent_x != ax0 || w.agent_y != ay0) {
                // The shove carries over as velocity, so pushed discs slide.
                w.discs[i].vx += px;
                w.discs[i].vy += py;
                touched[i] = true;
                moved = true;
            }
        }
        for (size_t i = 0; i < w.discs.size(); ++i) {
            for (size_t j = i + 1; j < w.discs.size(); ++j) {
                auto& a = w.discs[i];
                auto& b = w.discs[j];
                const double ddx = a.x - b.x, ddy = a.y - b.y;
                const double d2 = ddx * ddx + ddy * ddy;
                const double rs = a.radius + b.radius;
                if (d2 >= rs * rs) continue;
                const double dist = std::sqrt(d2);
                double nx = 1.0, ny = 0.0;
                if (dist > 1e-12) {
                    nx = ddx / dist;
                    ny = ddy / dist;
                }
                const double half_overlap = 0.5 * (rs - dist);
                a.x += nx * half_overlap;
                a.y += ny * half_overlap;
                b.x -= nx * half_overlap;
                b.y -= ny * half_overlap;
                moved = true;
            }
        }
        for (auto& d : w.discs) {
            // Walls absorb: clamp the position and stop the inward motion.
            if (d.x < d.radius) {
                d.x = d.radius;
                d.vx = std::max(d.vx, 0.0);
                moved = true;
            } else if (d.x > w.arena - d.radius) {
                d.x = w.arena - d.radius;
                d.vx = std::min(d.vx, 0.0);
                moved = true;
            }
            if (d.y < d.radius) {
                d.y = d.radius;
                d.vy = std::max(d.vy, 0.0);
                moved = true;
            } else if (d.y > w.arena - d.radius) {
                d.y = w.arena - d.radius;
                d.vy = std::min(d.vy, 0.0);
                moved = true;
            }
        }
        if (!moved) break;
    }

    for (auto& d : w.discs) {
        d.vx *= (1.0 - w.friction);
        d.vy *= (1.0 - w.friction);
    }
    return static_cast<int64_t>(std::count(touched.begin(), touched.end(), true));
}

torch::Tensor render_push(const PushWorldState& w, int64_t image_hw) {
    require(image_hw >= 1, "frame side must be positive");
    auto img = torch::empty({3, image_hw, image_hw}, torch::kFloat32);
    img[0].fill_(0.10f);
    img[1].fill_(0.10f);
    img[2].fill_(0.12f);
    auto acc = img.accessor<float, 3>();

    const double px = w.arena / static_cast<double>(image_hw);
    auto paint = [&](double x0, double y0, double x1, double y1, auto inside, float r, float g,
                     float b) {
        const auto i0 = std::max<int64_t>(0, static_cast<int64_t>(y0 / px) - 1);
        const auto i1 = std::min(image_hw - 1, static_cast<int64_t>(y1 / px) + 1);
        const auto j0 = std::max<int64_t>(0, static_cast<int64_t>(x0 / px) - 1);
        const auto j1 = std::min(image_hw - 1, static_cast<int64_t>(x1 / px) + 1);
        for (int64_t i = i0; i <= i1; ++i) {
            const double cy = (static_cast<double>(i) + 0.5) * px;
            for (int64_t j = j0; j <= j1; ++j) {
                const double cx = (static_cast<double>(j) + 0.5) * px;
                if (!inside(cx, cy)) continue;
                acc[0][i][j] = r;
                acc[1][i][j] = g;
                acc[2][i][j] = b;
            }
        }
    };

    for (const auto& d : w.discs)
        paint(d.x - d.radius, d.y - d.radius, d.x + d.radius, d.y + d.radius,
              [&](double cx, double cy) {
                  return (cx - d.x) * (cx - d.x) + (cy - d.y) * (cy - d.y) <=
                         d.radius * d.radius;
              },
              0.25f, 0.45f, 0.85f);
    paint(w.agent_x - w.agent_half, w.agent_y - w.agent_half, w.agent_x + w.agent_half,
          w.agent_y + w.agent_half,
          [&](double cx, double cy) {
              return std::abs(cx - w.agent_x) <= w.agent_half &&
                     std::abs(cy - w.agent_y) <= w.agent_half;
          },
          0.90f, 0.30f, 0.20f);
    return img;
}

std::vector<Disc> init_discs(const PushParams& p, RandomSource& rng) {
    std::vector<Disc> out;
    out.reserve(static_cast<size_t>(p.n_objects));
    const double agent_x = 0.5, agent_y = 0.5;
    for (int64_t i = 0; i < p.n_objects; ++i) {
        Disc d;
        d.radius = p.disc_radius;
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            d.x = scalar_uniform(rng, d.radius, 1.0 - d.radius);
            d.y = scalar_uniform(rng, d.radius, 1.0 - d.radius);
            const double cx = std::clamp(d.x, agent_x - p.agent_half, agent_x + p.agent_half);
            const double cy = std::clamp(d.y, agent_y - p.agent_half, agent_y + p.agent_half);
            placed = std::hypot(d.x - cx, d.y - cy) >= d.radius;
            for (const auto& o : out) {
                if (!placed) break;
                if (std::hypot(d.x - o.x, d.y - o.y) < d.radius + o.radius) placed = false;
            }
        }
        if (!placed)
            throw Error("could not place disc " + std::to_string(i) +
                        " without overlap after 1000 rejection samples");
        out.push_back(d);
    }
    return out;
}

namespace {

torch::Tensor centers_row(const std::vector<BallState>& balls) {
    auto t = torch::empty({static_cast<int64_t>(balls.size()), 2}, torch::kFloat32);
    auto a = t.accessor<float, 2>();
    for (size_t i = 0; i < balls.size(); ++i) {
        a[static_cast<int64_t>(i)][0] = static_cast<float>(balls[i].x);
        a[static_cast<int64_t>(i)][1] = static_cast<float>(balls[i].y);
    }
    return t;
}

torch::Tensor centers_row(const std::vector<Disc>& discs) {
    auto t = torch::empty({static_cast<int64_t>(discs.size()), 2}, torch::kFloat32);
    auto a = t.accessor<float, 2>();
    for (size_t i = 0; i < discs.size(); ++i) {
        a[static_cast<int64_t>(i)][0] = static_cast<float>(discs[i].x);
        a[static_cast<int64_t>(i)][1] = static_cast<float>(discs[i].y);
    }
    return t;
}

}  // namespace

Episode simulate_balls_episode(const BallsParams& p, uint64_t episode_seed, TensorMap* extras) {
    p.validate();
    RandomSource rng(episode_seed);
    auto balls = init_balls(p, rng);

    auto frames = torch::empty({p.steps, 3, p.image_hw, p.image_hw}, torch::kFloat32);
    auto centers = torch::empty({p.steps, p.n_balls, 2}, torch::kFloat32);
    auto collisions = torch::zeros({p.steps}, torch::kFloat32);
    frames[0] = render_balls(balls, p.image_hw, p.radius_min, p.radius_max);
    centers[0] = centers_row(balls);
    for (int64_t t = 1; t < p.steps; ++t) {
        collisions[t] = static_cast<float>(step_balls(balls));
        frames[t] = render_balls(balls, p.image_hw, p.radius_min, p.radius_max);
        centers[t] = centers_row(balls);
    }

    Episode ep;
    ep.frames = frames;
    ep.actions = torch::zeros({p.steps, 2}, torch::kFloat32);  // agent-free world
    if (extras) {
        (*extras)["centers"] = centers;
        (*extras)["collisions"] = collisions;
    }
    return ep;
}

Episode simulate_push_episode(const PushParams& p, uint64_t episode_seed, TensorMap* extras) {
    p.validate();
    RandomSource rng(episode_seed);
    PushWorldState w;
    w.agent_half = p.agent_half;
    w.friction = p.friction;
    w.discs = init_discs(p, rng);

    auto actions = (2.0 * rng.uniform({p.steps, 2}, torch::kFloat64) - 1.0) * p.action_scale;
    auto frames = torch::empty({p.steps, 3, p.image_hw, p.image_hw}, torch::kFloat32);
    auto centers = torch::empty({p.steps, std::max<int64_t>(p.n_objects, 1), 2}, torch::kFloat32);
    auto agent_track = torch::empty({p.steps, 2}, torch::kFloat32);
    auto collisions = torch::zeros({p.steps}, torch::kFloat32);

    auto record = [&](int64_t t) {
        frames[t] = render_push(w, p.image_hw);
        centers[t] = p.n_objects > 0 ? centers_row(w.discs) : torch::zeros({1, 2});
        agent_track[t][0] = static_cast<float>(w.agent_x);
        agent_track[t][1] = static_cast<float>(w.agent_y);
    };
    record(0);
    auto act = actions.accessor<double, 2>();
    for (int64_t t = 1; t < p.steps; ++t) {
        collisions[t] = static_cast<float>(step_push(w, act[t - 1][0], act[t - 1][1]));
        record(t);
    }

    Episode ep;
    ep.frames = frames;
    ep.actions = actions.to(torch::kFloat32);
    if (extras) {
        (*extras)["centers"] = centers;
        (*extras)["agent"] = agent_track;
        (*extras)["collisions"] = collisions;
    }
    return ep;
}

namespace {

std::string episode_name(int64_t index) {
    auto digits = std::to_string(index);
    if (digits.size() < 5) digits.insert(0, 5 - digits.size(), '0');
    return "episode_" + digits + ".gtsr";
}

template <typename Params, typename Simulate>
void generate_split(const Params& p, const std::string& dir, Simulate simulate) {
    p.validate();
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.txt");
    require(manifest.good(), "cannot write manifest in " + dir);
    for (int64_t i = 0; i < p.episodes; ++i) {
        TensorMap extras;
        Episode ep = simulate(p, derive_seed(p.seed, static_cast<uint64_t>(i)), &extras);
        const auto name = episode_name(i);
        ep.id = fs::path(name).stem().string();
        save_episode((fs::path(dir) / name).string(), ep, extras);
        manifest << name << "\n";
    }
}

}  // namespace

void generate_balls(const BallsParams& p, const std::string& dir) {
    generate_split(p, dir, [](const BallsParams& q, uint64_t s, TensorMap* e) {
        return simulate_balls_episode(q, s, e);
    });
}

void generate_agent_push(const PushParams& p, const std::string& dir) {
    generate_split(p, dir, [](const PushParams& q, uint64_t s, TensorMap* e) {
        return simulate_push_episode(q, s, e);
    });
}

std::vector<Episode> load_split(const std::string& dir, std::optional<uint64_t> shuffle_seed) {
    const auto manifest_path = fs::path(dir) / "manifest.txt";
    require(fs::exists(manifest_path), "no manifest.txt in " + dir);
    std::ifstream manifest(manifest_path);
    std::vector<std::string> names;
    for (std::string line; std::getline(manifest, line);)
        if (!line.empty()) names.push_back(line);

    std::vector<size_t> order(names.size());
    std::iota(order.begin(), order.end(), size_t{0});
    if (shuffle_seed) {
        RandomSource rng(*shuffle_seed);
        auto perm = rng.permutation(static_cast<int64_t>(names.size()));
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<size_t>(perm[i]);
    }

    std::vector<Episode> out;
    out.reserve(names.size());
    for (size_t i : order) {
        const auto path = fs::path(dir) / names[i];
        if (!fs::exists(path)) throw Error("manifest lists missing file: " + names[i]);
        out.push_back(load_episode(path.string()));
    }
    return out;
}

}  // namespace gatsbi
