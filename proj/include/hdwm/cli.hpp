// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface. Subcommands: gen-data, train-base, train-srr,
// distill, rollout, closed-loop, eval, report. Exit codes: 0 success,
// 1 validation/usage error, 2 runtime failure.

#pragma once

#include <cstdio>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "hdwm/pipeline.hpp"

namespace hdwm {

namespace cli {

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<long> steps;
};

inline RunConfig load(const CommonArgs& args) {
    RunConfig rc = load_config(args.config_path);
    if (args.seed) {
        rc.seed = *args.seed;
        rc.derive_and_validate();
    }
    return rc;
}

inline DenoiserParams load_model(const RunConfig& rc, const std::string& path,
                                 bool allow_mismatch) {
    auto ckpt = load_checkpoint(path);
    DenoiserParams p = init_model(rc);
    apply_checkpoint(p, ckpt, config_digest(rc), allow_mismatch);
    return p;
}

}  // namespace cli

inline int cli_main(int argc, const char* const* argv) {
    CLI::App app{"hdwm: anti-drifting world-model training and distillation sandbox"};
    app.require_subcommand(1);

    cli::CommonArgs common;
    std::string data_path, out_path, init_path, teacher_path, ckpt_path, gen_path, ref_path,
        in_path, student_init_path;
    bool allow_mismatch = false;
    int depth = -1, chunks = 50, sampler_steps = -1, clip_count = -1, chunk_override = -1;

    auto add_common = [&](CLI::App* cmd, bool with_steps = false) {
        cmd->add_option("--config", common.config_path, "run configuration (JSON)")->required();
        cmd->add_option("--seed", common.seed, "override the run seed");
        if (with_steps) cmd->add_option("--steps", common.steps, "override the step count");
    };

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic clip dataset");
    add_common(gen);
    gen->add_option("--out", out_path, "output dataset path")->required();

    auto* base = app.add_subcommand("train-base", "stage 1: conditional training");
    add_common(base, true);
    base->add_option("--data", data_path, "dataset path")->required();
    base->add_option("--out", out_path, "output checkpoint path")->required();

    auto* srr = app.add_subcommand("train-srr", "stage 2: scheduled rollout recovery");
    add_common(srr, true);
    srr->add_option("--data", data_path, "dataset path")->required();
    srr->add_option("--init", init_path, "base checkpoint to continue from")->required();
    srr->add_option("--out", out_path, "output checkpoint path")->required();
    srr->add_flag("--allow-config-mismatch", allow_mismatch,
                  "load a checkpoint whose config digest differs");

    auto* dist = app.add_subcommand("distill", "stage 3: teacher-rollout distillation");
    add_common(dist, true);
    dist->add_option("--data", data_path, "dataset path")->required();
    dist->add_option("--teacher", teacher_path, "frozen teacher checkpoint")->required();
    dist->add_option("--student-init", student_init_path,
                     "student initialization checkpoint (default: the teacher)");
    dist->add_option("--out", out_path, "output student checkpoint")->required();
    dist->add_option("--depth", depth, "override the student rollout depth N");
    dist->add_flag("--allow-config-mismatch", allow_mismatch,
                   "load checkpoints whose config digest differs");

    auto* roll = app.add_subcommand("rollout", "open-loop rollout to a generated dataset");
    add_common(roll);
    roll->add_option("--data", data_path, "reference dataset path")->required();
    roll->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
    roll->add_option("--out", out_path, "output generated dataset")->required();
    roll->add_option("--depth", depth, "rollout depth N (default: eval.rollout_depth)");
    roll->add_option("--sampler-steps", sampler_steps,
                     "Euler steps per chunk (default: diffusion.teacher_steps)");
    roll->add_option("--clips", clip_count, "clips to roll out (default: eval.clips)");
    roll->add_flag("--allow-config-mismatch", allow_mismatch,
                   "load a checkpoint whose config digest differs");

    auto* closed = app.add_subcommand("closed-loop", "closed-loop run with the scripted "
                                                     "pure-pursuit controller");
    add_common(closed);
    closed->add_option("--data", data_path, "reference dataset path")->required();
    closed->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
    closed->add_option("--out", out_path, "output generated dataset")->required();
    closed->add_option("--chunks", chunks, "closed-loop chunk count");
    closed->add_option("--sampler-steps", sampler_steps,
                       "Euler steps per chunk (default: trd.student_steps)");
    closed->add_flag("--allow-config-mismatch", allow_mismatch,
                     "load a checkpoint whose config digest differs");

    auto* ev = app.add_subcommand("eval", "drift report of a generated dataset against a "
                                          "reference");
    add_common(ev);
    ev->add_option("--gen", gen_path, "generated dataset")->required();
    ev->add_option("--ref", ref_path, "reference dataset")->required();
    ev->add_option("--out", out_path, "output CSV report")->required();
    ev->add_option("--chunk", chunk_override, "chunk size for the curves (default: train.K)");

    auto* rep = app.add_subcommand("report", "summarize a drift report CSV");
    rep->add_option("--in", in_path, "CSV report path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        std::fprintf(stderr, "run with --help for usage\n");
        return 1;
    }

    try {
        if (*gen) {
            const RunConfig rc = cli::load(common);
            save_dataset(out_path, gen_data(rc));
            std::printf("wrote %d clips x %d frames to %s\n", rc.data.clips, rc.data.frames,
                        out_path.c_str());
        } else if (*base) {
            const RunConfig rc = cli::load(common);
            auto clips = load_dataset(data_path);
            auto p = init_model(rc);
            train_base(rc, p, clips, common.steps.value_or(-1), [](long i, float loss) {
                if (i % 200 == 0) std::fprintf(stderr, "base step %ld loss %.4f\n", i, loss);
            });
            save_checkpoint(out_path, p.named, config_digest(rc));
            std::printf("wrote checkpoint %s\n", out_path.c_str());
        } else if (*srr) {
            const RunConfig rc = cli::load(common);
            auto clips = load_dataset(data_path);
            auto p = cli::load_model(rc, init_path, allow_mismatch);
            train_srr(rc, p, clips, common.steps.value_or(-1), [](long i, float loss) {
                if (i % 200 == 0) std::fprintf(stderr, "srr step %ld loss %.4f\n", i, loss);
            });
            save_checkpoint(out_path, p.named, config_digest(rc));
            std::printf("wrote checkpoint %s\n", out_path.c_str());
        } else if (*dist) {
            const RunConfig rc = cli::load(common);
            auto clips = load_dataset(data_path);
            const auto teacher = cli::load_model(rc, teacher_path, allow_mismatch);
            auto student = student_init_path.empty()
                               ? clone_params(teacher)
                               : cli::load_model(rc, student_init_path, allow_mismatch);
            auto critic = clone_params(teacher);
            distill(rc, student, teacher, critic, clips, common.steps.value_or(-1), depth,
                    [](long i, float loss) {
                        if (i % 50 == 0)
                            std::fprintf(stderr, "trd step %ld critic loss %.4f\n", i, loss);
                    });
            save_checkpoint(out_path, student.named, config_digest(rc));
            std::printf("wrote checkpoint %s\n", out_path.c_str());
        } else if (*roll) {
            const RunConfig rc = cli::load(common);
            auto clips = load_dataset(data_path);
            const auto p = cli::load_model(rc, ckpt_path, allow_mismatch);
            const int n = clip_count > 0 ? clip_count : rc.eval.clips;
            const int nd = depth > 0 ? depth : rc.eval.rollout_depth;
            const int ms = sampler_steps > 0 ? sampler_steps : rc.diffusion.teacher_steps;
            const auto sampler = SamplerConfig::uniform(ms);
            std::vector<Clip> out;
            for (int i = 0; i < n && i < static_cast<int>(clips.size()); ++i) {
                const Clip& ref = clips[static_cast<std::size_t>(i)];
                const Scene scene = generate_scene(rc.world, ref.seed);
                Rng rng = Rng(rc.seed).fork(streams::kEval).fork(static_cast<std::uint64_t>(i));
                const auto traj = rollout(p, ref, rc.train.T, rc.train.K, nd, sampler, rng);
                out.push_back(trajectory_as_clip(rc, ref, traj, scene));
            }
            save_dataset(out_path, out);
            std::printf("wrote %zu generated clips to %s\n", out.size(), out_path.c_str());
        } else if (*closed) {
            const RunConfig rc = cli::load(common);
            auto clips = load_dataset(data_path);
            const auto p = cli::load_model(rc, ckpt_path, allow_mismatch);
            const Clip& ref = clips.front();
            const Scene scene = generate_scene(rc.world, ref.seed);
            const int ms = sampler_steps > 0 ? sampler_steps : rc.trd.student_steps;
            Rng rng = Rng(rc.seed).fork(streams::kClosed);
            const auto res = closed_loop_rollout(
                p, rc.world, scene, ref, rc.train.T, rc.train.K, chunks,
                scripted_pure_pursuit(rc.world, rc.train.K), SamplerConfig::uniform(ms), rng);
            float max_abs = 0;
            for (float v : res.traj.generated) max_abs = std::max(max_abs, std::fabs(v));
            // package for eval: recovered poses already trace the run
            RunConfig rc_out = rc;
            Clip gen_clip;
            gen_clip.frames = rc.train.T + chunks * rc.train.K;
            gen_clip.latent_dim = ref.latent_dim;
            gen_clip.layout_dim = ref.layout_dim;
            gen_clip.seed = ref.seed;
            gen_clip.anchor_ids = ref.anchor_ids;
            gen_clip.latents.assign(ref.latents.begin(),
                                    ref.latents.begin() +
                                        static_cast<std::size_t>(rc.train.T) * ref.latent_dim);
            gen_clip.latents.insert(gen_clip.latents.end(), res.traj.generated.begin(),
                                    res.traj.generated.end());
            gen_clip.poses.assign(ref.poses.begin(), ref.poses.begin() + rc.train.T);
            for (int i = rc.train.T; i < gen_clip.frames; ++i)
                gen_clip.poses.push_back(recover_pose(
                    rc_out.world,
                    gen_clip.latents.data() + static_cast<std::size_t>(i) * ref.latent_dim,
                    scene, ref.anchor_ids));
            gen_clip.actions.assign(ref.actions.begin(), ref.actions.begin() + rc.train.T - 1);
            for (const auto& a : res.action_log) gen_clip.actions.push_back(a);
            gen_clip.layout.assign(ref.layout.begin(),
                                   ref.layout.begin() +
                                       static_cast<std::size_t>(rc.train.T) * ref.layout_dim);
            for (std::size_t i = 0; i < res.recovered_poses.size(); ++i) {
                // per-chunk layout re-derivation along controller poses
                std::vector<std::array<double, 3>> acts;
                for (int k = 0; k < rc.train.K; ++k) {
                    const auto& a = res.action_log[i * rc.train.K + static_cast<std::size_t>(k)];
                    acts.push_back({a[0], a[1], a[2]});
                }
                const auto future = integrate_actions(res.recovered_poses[i], acts);
                for (int k = 1; k <= rc.train.K; ++k) {
                    const auto lt = layout_tokens(rc.world, scene, future[static_cast<std::size_t>(k)]);
                    gen_clip.layout.insert(gen_clip.layout.end(), lt.begin(), lt.end());
                }
            }
            save_dataset(out_path, {gen_clip});
            std::printf("closed loop: chunks=%d controller_calls=%d max_latent=%.4f "
                        "recovery_failures=0\n",
                        chunks, res.controller_calls, max_abs);
        } else if (*ev) {
            const RunConfig rc = cli::load(common);
            auto gen_clips = load_dataset(gen_path);
            auto ref_clips = load_dataset(ref_path);
            const int T = rc.train.T;
            const int K = chunk_override > 0 ? chunk_override : rc.train.K;
            DriftReport mean;
            int used = 0;
            for (std::size_t i = 0; i < gen_clips.size(); ++i) {
                // match generated clips to references by seed
                const Clip* ref = nullptr;
                for (const auto& r : ref_clips)
                    if (r.seed == gen_clips[i].seed) {
                        ref = &r;
                        break;
                    }
                require(ref != nullptr, "eval: no reference clip with seed " +
                                            std::to_string(gen_clips[i].seed));
                const Scene scene = generate_scene(rc.world, ref->seed);
                const int d = ref->latent_dim;
                std::vector<float> gen_latents(
                    gen_clips[i].latents.begin() + static_cast<std::size_t>(T) * d,
                    gen_clips[i].latents.end());
                const auto rep = drift_report(rc.world, scene, gen_latents, *ref, T, K);
                if (mean.rows.empty()) {
                    mean = rep;
                } else {
                    require(mean.rows.size() == rep.rows.size(), "eval: chunk count mismatch");
                    for (std::size_t r = 0; r < rep.rows.size(); ++r) {
                        mean.rows[r].lfd += rep.rows[r].lfd;
                        mean.rows[r].are_deg += rep.rows[r].are_deg;
                        mean.rows[r].dtw += rep.rows[r].dtw;
                    }
                    mean.skipped_frames += rep.skipped_frames;
                }
                ++used;
            }
            for (auto& row : mean.rows) {
                row.lfd /= used;
                row.are_deg /= used;
                row.dtw /= used;
            }
            write_report(mean, out_path);
            std::printf("wrote %zu-chunk report over %d clips to %s\n", mean.rows.size(), used,
                        out_path.c_str());
        } else if (*rep) {
            const auto report = read_report(in_path);
            require(!report.rows.empty(), "report: empty CSV");
            const auto& last = report.rows.back();
            std::printf("chunks: %zu\n", report.rows.size());
            std::printf("final:  lfd=%.6g are_deg=%.6g dtw=%.6g\n", last.lfd, last.are_deg,
                        last.dtw);
            std::printf("slope:  lfd per chunk = %.6g\n", report_slope(report));
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const ContractViolation& e) {
        std::fprintf(stderr, "invalid input: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime failure: %s\n", e.what());
        return 2;
    }
    return 0;
}

}  // namespace hdwm
