// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics: dynamic time warping over ego trajectories, mean
// wrapped yaw error in degrees, the Fréchet distance between Gaussian fits
// of latent frames, and per-chunk drift curves over a rollout. Gaussian
// fitting and all matrix work run in double precision.

#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "hdwm/worldsim.hpp"

namespace hdwm {

// Classic full-matrix DP with {match, insert, delete} steps and Euclidean
// ground cost.
inline double dtw(const std::vector<std::array<double, 2>>& a,
                  const std::vector<std::array<double, 2>>& b) {
    require(!a.empty() && !b.empty(), "dtw: empty input sequence");
    const std::size_t n = a.size(), m = b.size();
    const double inf = 1e300;
    std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
    prev[0] = 0;
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = inf;
        for (std::size_t j = 1; j <= m; ++j) {
            const double cost =
                std::hypot(a[i - 1][0] - b[j - 1][0], a[i - 1][1] - b[j - 1][1]);
            cur[j] = cost + std::min({prev[j], cur[j - 1], prev[j - 1]});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

// Mean geodesic yaw error in degrees.
inline double are_degrees(const std::vector<double>& yaw_pred,
                          const std::vector<double>& yaw_gt) {
    require(yaw_pred.size() == yaw_gt.size(), "are: length mismatch, " +
                                                  std::to_string(yaw_pred.size()) + " vs " +
                                                  std::to_string(yaw_gt.size()));
    require(!yaw_pred.empty(), "are: empty input");
    double acc = 0;
    for (std::size_t i = 0; i < yaw_pred.size(); ++i)
        acc += std::fabs(wrap_angle(yaw_pred[i] - yaw_gt[i]));
    return acc / static_cast<double>(yaw_pred.size()) * (180.0 / 3.14159265358979323846);
}

struct GaussianSummary {
    int dim = 0;
    std::vector<double> mean;  // dim
    std::vector<double> cov;   // dim x dim, row-major
};

// 64-bit accumulation, unbiased covariance (zero for fewer than 2 samples).
inline GaussianSummary fit_gaussian(const float* frames, int n, int d) {
    require(n >= 1 && d >= 1, "fit_gaussian: need at least one sample");
    GaussianSummary g;
    g.dim = d;
    g.mean.assign(static_cast<std::size_t>(d), 0.0);
    g.cov.assign(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            g.mean[static_cast<std::size_t>(j)] += frames[static_cast<std::size_t>(i) * d + j];
    for (int j = 0; j < d; ++j) g.mean[static_cast<std::size_t>(j)] /= n;
    if (n < 2) return g;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            const double xj = frames[static_cast<std::size_t>(i) * d + j] - g.mean[j];
            for (int k = j; k < d; ++k) {
                const double xk = frames[static_cast<std::size_t>(i) * d + k] - g.mean[k];
                g.cov[static_cast<std::size_t>(j) * d + k] += xj * xk;
            }
        }
    for (int j = 0; j < d; ++j)
        for (int k = j; k < d; ++k) {
            const double v = g.cov[static_cast<std::size_t>(j) * d + k] / (n - 1);
            g.cov[static_cast<std::size_t>(j) * d + k] = v;
            g.cov[static_cast<std::size_t>(k) * d + j] = v;
        }
    return g;
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix.
inline void sym_eig(int n, std::vector<double> a, std::vector<double>& eigvals,
                    std::vector<double>& eigvecs) {
    eigvecs.assign(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) eigvecs[static_cast<std::size_t>(i) * n + i] = 1.0;
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a[static_cast<std::size_t>(p) * n + q] *
                                                   a[static_cast<std::size_t>(p) * n + q];
        if (off < 1e-26) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = a[static_cast<std::size_t>(p) * n + q];
                if (std::fabs(apq) < 1e-300) continue;
                const double app = a[static_cast<std::size_t>(p) * n + p];
                const double aqq = a[static_cast<std::size_t>(q) * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int i = 0; i < n; ++i) {
                    const double aip = a[static_cast<std::size_t>(i) * n + p];
                    const double aiq = a[static_cast<std::size_t>(i) * n + q];
                    a[static_cast<std::size_t>(i) * n + p] = c * aip - s * aiq;
                    a[static_cast<std::size_t>(i) * n + q] = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    const double api = a[static_cast<std::size_t>(p) * n + i];
                    const double aqi = a[static_cast<std::size_t>(q) * n + i];
                    a[static_cast<std::size_t>(p) * n + i] = c * api - s * aqi;
                    a[static_cast<std::size_t>(q) * n + i] = s * api + c * aqi;
                }
                for (int i = 0; i < n; ++i) {
                    const double vip = eigvecs[static_cast<std::size_t>(i) * n + p];
                    const double viq = eigvecs[static_cast<std::size_t>(i) * n + q];
                    eigvecs[static_cast<std::size_t>(i) * n + p] = c * vip - s * viq;
                    eigvecs[static_cast<std::size_t>(i) * n + q] = s * vip + c * viq;
                }
            }
    }
    eigvals.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) eigvals[static_cast<std::size_t>(i)] =
        a[static_cast<std::size_t>(i) * n + i];
}

// PSD square root via eigendecomposition, negative eigenvalues clipped at 0.
inline std::vector<double> sym_sqrt_psd(int n, const std::vector<double>& a) {
    std::vector<double> vals, vecs;
    sym_eig(n, a, vals, vecs);
    std::vector<double> out(static_cast<std::size_t>(n) * n, 0.0);
    for (int k = 0; k < n; ++k) {
        const double s = vals[static_cast<std::size_t>(k)] > 0
                             ? std::sqrt(vals[static_cast<std::size_t>(k)])
                             : 0.0;
        if (s == 0.0) continue;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                out[static_cast<std::size_t>(i) * n + j] +=
                    s * vecs[static_cast<std::size_t>(i) * n + k] *
                    vecs[static_cast<std::size_t>(j) * n + k];
    }
    return out;
}

// |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})
inline double latent_frechet(const GaussianSummary& g1, const GaussianSummary& g2) {
    require(g1.dim == g2.dim, "latent_frechet: dimension mismatch");
    const int n = g1.dim;
    // PSD check within tolerance
    for (const auto* g : {&g1, &g2}) {
        std::vector<double> vals, vecs;
        sym_eig(n, g->cov, vals, vecs);
        double max_eig = 0;
        for (double v : vals) max_eig = std::max(max_eig, std::fabs(v));
        for (double v : vals)
            require(v >= -1e-8 * std::max(1.0, max_eig),
                    "latent_frechet: covariance not PSD within tolerance");
    }
    double mean_term = 0;
    for (int i = 0; i < n; ++i)
        mean_term += (g1.mean[static_cast<std::size_t>(i)] -
                      g2.mean[static_cast<std::size_t>(i)]) *
                     (g1.mean[static_cast<std::size_t>(i)] -
                      g2.mean[static_cast<std::size_t>(i)]);
    const auto s1 = sym_sqrt_psd(n, g1.cov);
    // m = s1 * cov2 * s1, symmetrized
    std::vector<double> tmp(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            const double v = s1[static_cast<std::size_t>(i) * n + k];
            if (v == 0.0) continue;
            for (int j = 0; j < n; ++j)
                tmp[static_cast<std::size_t>(i) * n + j] +=
                    v * g2.cov[static_cast<std::size_t>(k) * n + j];
        }
    std::vector<double> m(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            const double v = tmp[static_cast<std::size_t>(i) * n + k];
            if (v == 0.0) continue;
            for (int j = 0; j < n; ++j)
                m[static_cast<std::size_t>(i) * n + j] +=
                    v * s1[static_cast<std::size_t>(k) * n + j];
        }
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double v = 0.5 * (m[static_cast<std::size_t>(i) * n + j] +
                                    m[static_cast<std::size_t>(j) * n + i]);
            m[static_cast<std::size_t>(i) * n + j] = v;
            m[static_cast<std::size_t>(j) * n + i] = v;
        }
    const auto sm = sym_sqrt_psd(n, m);
    double trace_term = 0;
    for (int i = 0; i < n; ++i)
        trace_term += g1.cov[static_cast<std::size_t>(i) * n + i] +
                      g2.cov[static_cast<std::size_t>(i) * n + i] -
                      2.0 * sm[static_cast<std::size_t>(i) * n + i];
    return std::max(0.0, mean_term + trace_term);
}

struct DriftRow {
    int chunk = 0;
    double lfd = 0;
    double are_deg = 0;
    double dtw = 0;
};

struct DriftReport {
    std::vector<DriftRow> rows;
    int skipped_frames = 0;  // pose-recovery degeneracies
};

// Per-chunk drift curves of a generated trajectory against the ground-truth
// clip: latent Fréchet distance over cumulative frames (or per-chunk frames
// with cumulative=false), plus ARE/DTW over poses recovered from both sides.
inline DriftReport drift_report(const WorldConfig& wcfg, const Scene& scene,
                                const std::vector<float>& generated, const Clip& clip, int T,
                                int K, bool cumulative = true) {
    const int d = clip.latent_dim;
    require(K >= 1, "drift_report: chunk size must be positive");
    require(generated.size() % (static_cast<std::size_t>(K) * d) == 0,
            "drift_report: generated length not a whole number of chunks");
    const int N = static_cast<int>(generated.size() / (static_cast<std::size_t>(K) * d));
    require(clip.frames >= T + N * K,
            "drift_report: generated and GT frame counts do not match");

    DriftReport report;
    std::vector<std::array<double, 2>> pos_pred, pos_gt;
    std::vector<double> yaw_pred, yaw_gt;
    for (int n = 1; n <= N; ++n) {
        for (int i = (n - 1) * K; i < n * K; ++i) {
            const float* zp = generated.data() + static_cast<std::size_t>(i) * d;
            const float* zg = clip.latents.data() + static_cast<std::size_t>(T + i) * d;
            try {
                const EgoState ep = recover_pose(wcfg, zp, scene, clip.anchor_ids);
                const EgoState eg = recover_pose(wcfg, zg, scene, clip.anchor_ids);
                pos_pred.push_back({ep.x, ep.y});
                yaw_pred.push_back(ep.yaw);
                pos_gt.push_back({eg.x, eg.y});
                yaw_gt.push_back(eg.yaw);
            } catch (const DegenerateGeometry&) {
                ++report.skipped_frames;
            }
        }
        const int lo = cumulative ? 0 : (n - 1) * K;
        const int m = n * K - lo;
        const auto g_gen = fit_gaussian(generated.data() + static_cast<std::size_t>(lo) * d, m, d);
        const auto g_gt =
            fit_gaussian(clip.latents.data() + static_cast<std::size_t>(T + lo) * d, m, d);
        DriftRow row;
        row.chunk = n;
        row.lfd = latent_frechet(g_gen, g_gt);
        row.are_deg = yaw_pred.empty() ? 0.0 : are_degrees(yaw_pred, yaw_gt);
        row.dtw = pos_pred.empty() ? 0.0 : dtw(pos_pred, pos_gt);
        report.rows.push_back(row);
    }
    return report;
}

}  // namespace hdwm
