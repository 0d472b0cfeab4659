// SPDX-License-Identifier: Apache-2.0
//
// Synthetic 2D kinematic driving world. Scenes are landmark fields with a
// smooth waypoint track; the ego follows the track with pure-pursuit
// steering under a unicycle model. Latents deterministically encode the
// anchor landmarks in the ego frame plus speed and track curvature, so pose
// recovery reduces to closed-form rigid registration with known
// correspondences.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "hdwm/tensor.hpp"

namespace hdwm {

struct DegenerateGeometry : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline double wrap_angle(double a) {
    constexpr double two_pi = 6.283185307179586476925286766559;
    double w = std::remainder(a, two_pi);
    if (w <= -3.14159265358979323846) w += two_pi;
    return w;
}

struct WorldConfig {
    int landmarks = 12;
    int anchors = 3;          // k, encoded into latents
    int layout_landmarks = 3; // m, encoded into layout tokens (disjoint from anchors)
    double box_half = 16.0;
    int track_points = 80;
    double track_step = 1.0;
    double lookahead = 3.0;
    double steer_gain = 0.6;
    double omega_cap = 0.18;  // rad per frame
    double accel_cap = 0.06;  // speed units per frame
    int speed_period = 36;    // frames per speed-profile cycle
    double coord_scale = 12.0;
    double curv_scale = 5.0;

    int latent_dim() const { return 2 * anchors + 2; }
    int layout_dim() const { return 2 * layout_landmarks; }

    void validate() const {
        require(anchors >= 2, "world config: need at least 2 anchors");
        require(landmarks >= anchors + layout_landmarks,
                "world config: not enough landmarks for anchors + layout set");
        require(box_half > 0 && track_points >= 4 && track_step > 0 && coord_scale > 0,
                "world config: invalid geometry");
    }
};

struct Vec2 {
    double x = 0, y = 0;
};

struct EgoState {
    double x = 0, y = 0;
    double yaw = 0;  // wrapped to (-pi, pi]
    double speed = 0;
};

struct Scene {
    std::vector<Vec2> landmarks;
    std::vector<Vec2> track;
    std::vector<double> track_heading;    // per segment
    std::vector<double> track_curvature;  // per waypoint
    std::vector<int> anchor_ids;
    std::vector<int> layout_ids;
    double v_max = 1.0;
    double speed_phase = 0.0;
    std::uint64_t seed = 0;
};

struct Clip {
    int frames = 0;
    int latent_dim = 0;
    int layout_dim = 0;
    std::vector<float> latents;                 // frames x latent_dim
    std::vector<std::array<float, 3>> actions;  // frames-1 entries
    std::vector<float> layout;                  // frames x layout_dim
    std::vector<EgoState> poses;
    std::vector<int> anchor_ids;
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------

inline Scene generate_scene(const WorldConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(Rng::mix(seed ^ 0x5EEDC0DEULL));
    Scene s;
    s.seed = seed;
    s.v_max = 0.7 + 0.4 * rng.uniform();
    s.speed_phase = rng.uniform() * 6.283185307179586;

    s.landmarks.resize(static_cast<std::size_t>(cfg.landmarks));
    for (auto& p : s.landmarks) {
        p.x = (rng.uniform() * 2.0 - 1.0) * cfg.box_half;
        p.y = (rng.uniform() * 2.0 - 1.0) * cfg.box_half;
    }

    // smooth random polyline, steered back toward the center near the walls
    Vec2 pos{-cfg.box_half * 0.85, (rng.uniform() - 0.5) * cfg.box_half * 0.8};
    double heading = (rng.uniform() - 0.5) * 0.6;
    s.track.push_back(pos);
    for (int i = 1; i < cfg.track_points; ++i) {
        double turn = (rng.uniform() - 0.5) * 0.22;
        const double r = std::hypot(pos.x, pos.y);
        if (r > cfg.box_half * 0.9) {
            const double to_center = wrap_angle(std::atan2(-pos.y, -pos.x) - heading);
            turn += 0.12 * (to_center > 0 ? 1.0 : -1.0);
        }
        heading = wrap_angle(heading + std::clamp(turn, -0.25, 0.25));
        pos.x += cfg.track_step * std::cos(heading);
        pos.y += cfg.track_step * std::sin(heading);
        s.track.push_back(pos);
    }

    const std::size_t n = s.track.size();
    s.track_heading.resize(n - 1);
    for (std::size_t i = 0; i + 1 < n; ++i)
        s.track_heading[i] =
            std::atan2(s.track[i + 1].y - s.track[i].y, s.track[i + 1].x - s.track[i].x);
    s.track_curvature.assign(n, 0.0);
    for (std::size_t i = 1; i + 1 < n; ++i)
        s.track_curvature[i] =
            wrap_angle(s.track_heading[i] - s.track_heading[i - 1]) / cfg.track_step;
    s.track_curvature[0] = s.track_curvature[1];
    s.track_curvature[n - 1] = s.track_curvature[n - 2];

    // anchors = k landmarks nearest to the track start; the layout set is the
    // next m nearest, disjoint from the anchors
    std::vector<int> order(s.landmarks.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    const Vec2 start = s.track[0];
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double da = std::hypot(s.landmarks[a].x - start.x, s.landmarks[a].y - start.y);
        const double db = std::hypot(s.landmarks[b].x - start.x, s.landmarks[b].y - start.y);
        if (da != db) return da < db;
        return a < b;
    });
    s.anchor_ids.assign(order.begin(), order.begin() + cfg.anchors);
    s.layout_ids.assign(order.begin() + cfg.anchors,
                        order.begin() + cfg.anchors + cfg.layout_landmarks);
    for (std::size_t i = 0; i < s.anchor_ids.size(); ++i)
        for (std::size_t j = i + 1; j < s.anchor_ids.size(); ++j) {
            const Vec2 a = s.landmarks[s.anchor_ids[i]];
            const Vec2 b = s.landmarks[s.anchor_ids[j]];
            require(std::hypot(a.x - b.x, a.y - b.y) > 1e-9,
                    "generate_scene: coincident anchors");
        }
    return s;
}

// Closest point on the track polyline: segment index and parameter.
struct TrackProjection {
    int segment = 0;
    double u = 0;  // in [0, 1] along the segment
};

inline TrackProjection project_to_track(const Scene& s, double x, double y) {
    TrackProjection best;
    double best_d2 = 1e300;
    for (std::size_t i = 0; i + 1 < s.track.size(); ++i) {
        const Vec2 a = s.track[i], b = s.track[i + 1];
        const double dx = b.x - a.x, dy = b.y - a.y;
        const double len2 = dx * dx + dy * dy;
        double u = len2 > 0 ? ((x - a.x) * dx + (y - a.y) * dy) / len2 : 0.0;
        u = std::clamp(u, 0.0, 1.0);
        const double px = a.x + u * dx, py = a.y + u * dy;
        const double d2 = (x - px) * (x - px) + (y - py) * (y - py);
        if (d2 < best_d2) {
            best_d2 = d2;
            best.segment = static_cast<int>(i);
            best.u = u;
        }
    }
    return best;
}

inline double curvature_at(const Scene& s, double x, double y) {
    const TrackProjection pr = project_to_track(s, x, y);
    const double k0 = s.track_curvature[pr.segment];
    const double k1 = s.track_curvature[pr.segment + 1];
    return (1.0 - pr.u) * k0 + pr.u * k1;
}

// Unicycle with pure-pursuit steering and a slow cyclic speed target.
// Per-frame |yaw rate| and |acceleration| respect the config caps.
inline std::vector<EgoState> drive(const WorldConfig& cfg, const Scene& s, int steps) {
    require(steps >= 2, "drive: need at least 2 steps");
    std::vector<EgoState> poses;
    poses.reserve(static_cast<std::size_t>(steps));
    EgoState e;
    e.x = s.track[0].x;
    e.y = s.track[0].y;
    e.yaw = s.track_heading[0];
    e.speed = 0.6 * s.v_max;
    poses.push_back(e);
    for (int i = 1; i < steps; ++i) {
        const TrackProjection pr = project_to_track(s, e.x, e.y);
        // lookahead point a fixed arc length further along the polyline
        double remain = cfg.lookahead;
        int seg = pr.segment;
        double u = pr.u;
        Vec2 target = s.track.back();
        while (seg < static_cast<int>(s.track.size()) - 1) {
            const double seg_left = (1.0 - u) * cfg.track_step;
            if (remain <= seg_left) {
                const double uu = u + remain / cfg.track_step;
                const Vec2 a = s.track[seg], b = s.track[seg + 1];
                target = {a.x + uu * (b.x - a.x), a.y + uu * (b.y - a.y)};
                break;
            }
            remain -= seg_left;
            ++seg;
            u = 0.0;
        }
        const double bearing = std::atan2(target.y - e.y, target.x - e.x);
        const double omega =
            std::clamp(cfg.steer_gain * wrap_angle(bearing - e.yaw), -cfg.omega_cap, cfg.omega_cap);
        const double v_prof =
            s.v_max * (0.55 + 0.45 * std::cos(6.283185307179586 * i / cfg.speed_period +
                                              s.speed_phase));
        const double v_des = v_prof * (1.0 - 0.5 * std::fabs(omega) / cfg.omega_cap);
        e.speed += std::clamp(v_des - e.speed, -cfg.accel_cap, cfg.accel_cap);
        e.x += e.speed * std::cos(e.yaw);
        e.y += e.speed * std::sin(e.yaw);
        e.yaw = wrap_angle(e.yaw + omega);
        poses.push_back(e);
    }
    return poses;
}

// Ego-frame coordinates of one landmark, divided by the coordinate scale.
inline std::array<double, 2> ego_coords(const WorldConfig& cfg, const EgoState& pose,
                                        const Vec2& p) {
    const double dx = p.x - pose.x, dy = p.y - pose.y;
    const double c = std::cos(pose.yaw), s = std::sin(pose.yaw);
    return {(dx * c + dy * s) / cfg.coord_scale, (-dx * s + dy * c) / cfg.coord_scale};
}

// Latent layout: [anchor0.x, anchor0.y, ..., speed, curvature], all float32.
inline std::vector<float> encode_latent(const WorldConfig& cfg, const Scene& s,
                                        const EgoState& pose) {
    require(static_cast<int>(s.anchor_ids.size()) >= cfg.anchors,
            "encode_latent: scene has too few anchors");
    std::vector<float> z(static_cast<std::size_t>(cfg.latent_dim()));
    for (int j = 0; j < cfg.anchors; ++j) {
        const auto e = ego_coords(cfg, pose, s.landmarks[s.anchor_ids[j]]);
        z[2 * j] = static_cast<float>(e[0]);
        z[2 * j + 1] = static_cast<float>(e[1]);
    }
    z[2 * cfg.anchors] = static_cast<float>(pose.speed);
    z[2 * cfg.anchors + 1] =
        static_cast<float>(curvature_at(s, pose.x, pose.y) * cfg.curv_scale);
    return z;
}

inline std::vector<float> layout_tokens(const WorldConfig& cfg, const Scene& s,
                                        const EgoState& pose) {
    std::vector<float> out(static_cast<std::size_t>(cfg.layout_dim()));
    for (int j = 0; j < cfg.layout_landmarks; ++j) {
        const auto e = ego_coords(cfg, pose, s.landmarks[s.layout_ids[j]]);
        out[2 * j] = static_cast<float>(e[0]);
        out[2 * j + 1] = static_cast<float>(e[1]);
    }
    return out;
}

// Closed-form 2D rigid registration of the latent's anchor block against the
// known anchor world positions; speed is read directly from the latent.
inline EgoState recover_pose(const WorldConfig& cfg, const float* latent, const Scene& s,
                             const std::vector<int>& anchor_ids) {
    const int k = static_cast<int>(anchor_ids.size());
    require(k >= 2, "recover_pose: need at least 2 anchors");
    double qx_bar = 0, qy_bar = 0, px_bar = 0, py_bar = 0;
    for (int j = 0; j < k; ++j) {
        qx_bar += latent[2 * j] * cfg.coord_scale;
        qy_bar += latent[2 * j + 1] * cfg.coord_scale;
        px_bar += s.landmarks[anchor_ids[j]].x;
        py_bar += s.landmarks[anchor_ids[j]].y;
    }
    qx_bar /= k;
    qy_bar /= k;
    px_bar /= k;
    py_bar /= k;
    double s_dot = 0, s_cross = 0;
    for (int j = 0; j < k; ++j) {
        const double qx = latent[2 * j] * cfg.coord_scale - qx_bar;
        const double qy = latent[2 * j + 1] * cfg.coord_scale - qy_bar;
        const double px = s.landmarks[anchor_ids[j]].x - px_bar;
        const double py = s.landmarks[anchor_ids[j]].y - py_bar;
        s_dot += qx * px + qy * py;
        s_cross += qx * py - qy * px;
    }
    if (std::hypot(s_dot, s_cross) < 1e-12)
        throw DegenerateGeometry("recover_pose: degenerate anchor geometry");
    const double yaw = std::atan2(s_cross, s_dot);
    const double c = std::cos(yaw), sn = std::sin(yaw);
    EgoState e;
    e.yaw = wrap_angle(yaw);
    e.x = px_bar - (c * qx_bar - sn * qy_bar);
    e.y = py_bar - (sn * qx_bar + c * qy_bar);
    e.speed = latent[2 * k];
    return e;
}

// Per-step relative transform expressed in the frame of the earlier pose.
inline std::vector<std::array<double, 3>> actions_from_poses(const std::vector<EgoState>& poses) {
    require(poses.size() >= 2, "actions_from_poses: need at least 2 poses");
    std::vector<std::array<double, 3>> acts(poses.size() - 1);
    for (std::size_t i = 0; i + 1 < poses.size(); ++i) {
        const double dx = poses[i + 1].x - poses[i].x;
        const double dy = poses[i + 1].y - poses[i].y;
        const double c = std::cos(poses[i].yaw), s = std::sin(poses[i].yaw);
        acts[i] = {dx * c + dy * s, -dx * s + dy * c,
                   wrap_angle(poses[i + 1].yaw - poses[i].yaw)};
    }
    return acts;
}

inline std::vector<EgoState> integrate_actions(const EgoState& start,
                                               const std::vector<std::array<double, 3>>& acts) {
    std::vector<EgoState> poses{start};
    for (const auto& a : acts) {
        const EgoState& e = poses.back();
        EgoState n;
        const double c = std::cos(e.yaw), s = std::sin(e.yaw);
        n.x = e.x + a[0] * c - a[1] * s;
        n.y = e.y + a[0] * s + a[1] * c;
        n.yaw = wrap_angle(e.yaw + a[2]);
        n.speed = std::hypot(a[0], a[1]);
        poses.push_back(n);
    }
    return poses;
}

inline Clip make_clip(const WorldConfig& cfg, std::uint64_t seed, int frames) {
    const Scene s = generate_scene(cfg, seed);
    const auto poses = drive(cfg, s, frames);
    Clip clip;
    clip.frames = frames;
    clip.latent_dim = cfg.latent_dim();
    clip.layout_dim = cfg.layout_dim();
    clip.seed = seed;
    clip.anchor_ids = s.anchor_ids;
    clip.poses = poses;
    clip.latents.reserve(static_cast<std::size_t>(frames) * cfg.latent_dim());
    clip.layout.reserve(static_cast<std::size_t>(frames) * cfg.layout_dim());
    for (const auto& pose : poses) {
        const auto z = encode_latent(cfg, s, pose);
        clip.latents.insert(clip.latents.end(), z.begin(), z.end());
        const auto lt = layout_tokens(cfg, s, pose);
        clip.layout.insert(clip.layout.end(), lt.begin(), lt.end());
    }
    const auto acts = actions_from_poses(poses);
    clip.actions.resize(acts.size());
    for (std::size_t i = 0; i < acts.size(); ++i)
        clip.actions[i] = {static_cast<float>(acts[i][0]), static_cast<float>(acts[i][1]),
                           static_cast<float>(acts[i][2])};
    return clip;
}

inline std::vector<Clip> make_clips(const WorldConfig& cfg, std::uint64_t seed, int count,
                                    int frames) {
    std::vector<Clip> clips;
    clips.reserve(static_cast<std::size_t>(count));
    Rng rng(seed);
    for (int i = 0; i < count; ++i)
        clips.push_back(make_clip(cfg, rng.fork(static_cast<std::uint64_t>(i)).seed(), frames));
    return clips;
}

}  // namespace hdwm
