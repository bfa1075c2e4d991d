#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "gatsbi/rng.hpp"
#include "gatsbi/tensor_store.hpp"
#include "gatsbi/types.hpp"

namespace gatsbi {

/// One bouncing ball in the unit arena. Mass scales with the disc area and
/// the depth shade is tied to the radius: larger balls sit nearer the camera,
/// so they both occlude smaller ones and render brighter, the way a depth
/// image of 3-D spheres would.
struct BallState {
    double x = 0, y = 0;
    double vx = 0, vy = 0;
    double radius = 0.1;

    double mass() const { return radius * radius; }
};

struct BallsParams {
    int64_t n_balls = 3;
    int64_t episodes = 500;
    int64_t steps = 20;  // frames per episode
    int64_t image_hw = 64;
    double radius_min = 0.06, radius_max = 0.12;
    double speed_min = 0.015, speed_max = 0.04;  // arena units per frame
    uint64_t seed = 0;

    void validate() const;
};

/// Elastic impulse exchange between two overlapping, approaching balls plus a
/// mass-weighted positional de-overlap (center of mass stays put). Returns
/// true when an impulse was applied. Momentum and kinetic energy are
/// conserved per event.
bool resolve_ball_pair(BallState& a, BallState& b);

/// Specular wall reflection: the position mirrors off the wall and the normal
/// velocity component flips, so speed is preserved exactly.
void resolve_walls(BallState& b, double arena);

/// Advances one frame interval with enough substeps that no ball moves more
/// than half the smallest radius at a time (no tunneling). Returns the number
/// of ball-ball impulse events.
int64_t step_balls(std::vector<BallState>& balls, double arena = 1.0);

/// Depth-style rendering: shaded domes, drawn far-to-near so overlap is
/// resolved by geometric occlusion; grayscale replicated to 3 channels.
/// A pure function of the state. -> [3, hw, hw] float32 in [0, 1]
torch::Tensor render_balls(const std::vector<BallState>& balls, int64_t image_hw,
                           double radius_min, double radius_max);

/// Rejection-samples non-overlapping balls with uniform radii and speeds.
/// Throws after 1000 failed placement attempts for any single ball.
std::vector<BallState> init_balls(const BallsParams& p, RandomSource& rng);

/// One disc the agent can push around.
struct Disc {
    double x = 0, y = 0;
    double vx = 0, vy = 0;
    double radius = 0.07;
};

/// Square arena with an axis-aligned agent box and pushable discs.
struct PushWorldState {
    double agent_x = 0.5, agent_y = 0.5;
    double agent_half = 0.08;  // box half-extent
    std::vector<Disc> discs;
    double arena = 1.0;
    double friction = 0.2;  // per-step velocity decay fraction
};

struct PushParams {
    int64_t n_objects = 3;
    int64_t episodes = 500;
    int64_t steps = 20;
    int64_t image_hw = 64;
    double agent_half = 0.08;
    double disc_radius = 0.07;
    double friction = 0.2;
    double action_scale = 0.05;  // actions drawn uniform in [-scale, scale]^2
    uint64_t seed = 0;

    void validate() const;
};

/// Most-negative separation over all agent-disc and disc-disc pairs (and disc
/// to wall); non-negative means nothing interpenetrates.
double min_separation(const PushWorldState& w);

/// One action step: the agent box translates by exactly (dx, dy) (clamped to
/// the arena), contact pushes discs out by positional projection — the
/// displacement is also handed to the disc as velocity — disc-disc and wall
/// overlaps are projected out iteratively, and friction decays velocities.
/// Returns the number of agent-disc contacts.
int64_t step_push(PushWorldState& w, double dx, double dy);

/// Flat colors, discs drawn first and the agent on top. Pure in the state.
/// -> [3, hw, hw] float32 in [0, 1]
torch::Tensor render_push(const PushWorldState& w, int64_t image_hw);

std::vector<Disc> init_discs(const PushParams& p, RandomSource& rng);

/// Simulate a single episode; extras (per-frame centers, collision counts,
/// the push agent track) are appended to *extras when given.
Episode simulate_balls_episode(const BallsParams& p, uint64_t episode_seed,
                               TensorMap* extras = nullptr);
Episode simulate_push_episode(const PushParams& p, uint64_t episode_seed,
                              TensorMap* extras = nullptr);

/// Write a full split: episode_%05d.gtsr files plus manifest.txt listing them
/// in index order. Episode i uses a seed derived from (p.seed, i), so output
/// bytes depend only on the parameters.
void generate_balls(const BallsParams& p, const std::string& dir);
void generate_agent_push(const PushParams& p, const std::string& dir);

/// Load every episode named by dir/manifest.txt, in manifest order, or in a
/// seed-reproducible shuffled order when shuffle_seed is set. A listed but
/// missing file raises an error naming it.
std::vector<Episode> load_split(const std::string& dir,
                                std::optional<uint64_t> shuffle_seed = std::nullopt);

}  // namespace gatsbi
