// Command-line entry points: dataset generation, per-video training, editing,
// evaluation and the ablation sweep. Exit codes: 0 success, 2 validation
// error, 3 numerical abort.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "protag/runner.hpp"

using namespace protag;

namespace {

std::uint64_t default_seed_from_env() {
    if (const char* env = std::getenv("PROTAGONIST_SEED")) {
        try {
            return std::stoull(env);
        } catch (...) {
            throw ValidationError("PROTAGONIST_SEED is not an integer: " + std::string(env));
        }
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mask-guided video editing toolkit"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    try {
        seed = default_seed_from_env();
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    // synth ---------------------------------------------------------------
    auto* synth = app.add_subcommand("synth", "generate a synthetic scene corpus");
    std::string synth_config, synth_out;
    synth->add_option("--config", synth_config, "JSON config with a 'scenes' array (default corpus when omitted)");
    synth->add_option("--out", synth_out, "output directory")->required();

    // train ---------------------------------------------------------------
    auto* train = app.add_subcommand("train", "fine-tune the denoiser on one video");
    std::string train_scene, train_out, train_base_in, train_base_out;
    TrainConfig tcfg;
    train->add_option("--scene", train_scene, "scene directory")->required();
    train->add_option("--out", train_out, "output checkpoint path")->required();
    train->add_option("--steps", tcfg.steps, "fine-tuning steps (default 2000)");
    train->add_option("--lr", tcfg.learning_rate, "learning rate (default 3e-4)");
    train->add_option("--dropout", tcfg.cond_dropout_p, "conditioning dropout probability (default 0.1)");
    train->add_option("--pretrain-steps", tcfg.pretrain_steps, "grounding pretraining steps (default 900)");
    train->add_option("--pretrain-frames", tcfg.pretrain_frames, "frames per pretraining clip (default 4)");
    train->add_option("--seed", tcfg.seed, "rng seed (default $PROTAGONIST_SEED or 0)");
    train->add_option("--base", train_base_in, "start from a pretrained base checkpoint");
    train->add_option("--save-base", train_base_out, "persist the pretrained base for reuse");

    // edit ----------------------------------------------------------------
    auto* editc = app.add_subcommand("edit", "edit a source video with a trained checkpoint");
    std::string edit_ckpt, edit_scene, edit_mode = "reconstruct", edit_prompt, edit_out, edit_trace;
    std::vector<std::string> edit_refs;
    int edit_tau_f = -1, edit_tau_l = -1, edit_steps = -1;
    double edit_guidance = -1.0;
    bool nearest_masks = false, no_control = false, raw_prior = false, no_ff = false, no_lf = false;
    std::uint64_t edit_seed = seed;
    editc->add_option("--ckpt", edit_ckpt, "model checkpoint")->required();
    editc->add_option("--scene", edit_scene, "source scene directory")->required();
    editc->add_option("--mode", edit_mode, "protagonist|background|text2video|reconstruct");
    editc->add_option("--ref", edit_refs, "reference image(s), one per edited protagonist");
    editc->add_option("--prompt", edit_prompt, "background/editing prompt");
    editc->add_option("--tau-f", edit_tau_f, "feature fusion start (training-scale t; default 0.2*T)");
    editc->add_option("--tau-l", edit_tau_l, "latent fusion start (default 0.2*T)");
    editc->add_option("--guidance", edit_guidance, "classifier-free guidance scale (default 7.5)");
    editc->add_option("--steps", edit_steps, "sampling steps (default 50)");
    editc->add_option("--seed", edit_seed, "rng seed recorded in the report");
    editc->add_option("--trace", edit_trace, "write per-step trace JSON here");
    editc->add_flag("--nearest-masks", nearest_masks, "nearest-neighbor mask downsampling instead of area averaging");
    editc->add_flag("--no-control", no_control, "zero the structure control signal");
    editc->add_flag("--raw-text-prior", raw_prior, "bypass the prior converter (seeded projection)");
    editc->add_flag("--no-feature-fusion", no_ff, "pure reference field at every step");
    editc->add_flag("--no-latent-fusion", no_lf, "single fused-branch trajectory");
    editc->add_option("--out", edit_out, "output directory")->required();

    // eval ----------------------------------------------------------------
    auto* evalc = app.add_subcommand("eval", "score an edited video against its source");
    std::string eval_source, eval_edited, eval_prompt, eval_ref;
    bool whole_frame = false;
    evalc->add_option("--source", eval_source, "source scene directory")->required();
    evalc->add_option("--edited", eval_edited, "edited video directory")->required();
    evalc->add_option("--prompt", eval_prompt, "prompt for prompt fidelity");
    evalc->add_option("--ref", eval_ref, "reference image for subject fidelity");
    evalc->add_flag("--whole-frame", whole_frame, "whole-frame subject fidelity (no masking)");

    // ablate --------------------------------------------------------------
    auto* ablate = app.add_subcommand("ablate", "five-way ablation of one text2video edit");
    std::string ab_ckpt, ab_scene, ab_out, ab_ref, ab_prompt;
    std::uint64_t ab_seed = seed;
    int ab_seeds = 3, ab_jobs = 1;
    ablate->add_option("--ckpt", ab_ckpt, "model checkpoint")->required();
    ablate->add_option("--scene", ab_scene, "source scene directory")->required();
    ablate->add_option("--out", ab_out, "output directory")->required();
    ablate->add_option("--seed", ab_seed, "base seed");
    ablate->add_option("--seeds", ab_seeds, "number of seeds to average (default 3)");
    ablate->add_option("--jobs", ab_jobs, "concurrent edits (default 1)");
    ablate->add_option("--ref", ab_ref, "reference image (default: derived from the source)");
    ablate->add_option("--prompt", ab_prompt, "background prompt (default: derived from the source)");

    // ref -----------------------------------------------------------------
    auto* refc = app.add_subcommand("ref", "render a canonical reference image for a phrase");
    std::string ref_phrase, ref_out;
    int ref_resolution = 32;
    refc->add_option("--phrase", ref_phrase, "e.g. 'blue circle' or 'striped yellow background'")->required();
    refc->add_option("--out", ref_out, "output PNG path")->required();
    refc->add_option("--resolution", ref_resolution, "image size (default 32)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        auto experts = make_oracle_registry();
        auto sched = make_linear_schedule();

        if (*synth) {
            std::optional<std::filesystem::path> cfg;
            if (!synth_config.empty()) cfg = synth_config;
            auto manifest = run_synth(cfg, synth_out);
            std::cout << manifest.dump(2) << "\n";
        } else if (*train) {
            if (!train->count("--seed")) tcfg.seed = seed;
            TrainCommand cmd;
            cmd.scene_dir = train_scene;
            cmd.out_checkpoint = train_out;
            cmd.cfg = tcfg;
            if (!train_base_in.empty()) cmd.base_in = train_base_in;
            if (!train_base_out.empty()) cmd.base_out = train_base_out;
            auto summary = run_train(cmd, experts, sched);
            std::cout << summary.dump(2) << "\n";
        } else if (*editc) {
            EditCommand cmd;
            cmd.checkpoint = edit_ckpt;
            cmd.out_dir = edit_out;
            if (!edit_trace.empty()) cmd.trace_path = edit_trace;
            cmd.request.mode = edit_mode_from_string(edit_mode);
            cmd.request.source = edit_scene;
            for (const auto& r : edit_refs) cmd.request.reference_images.emplace_back(r);
            cmd.request.prompt = edit_prompt;
            if (edit_tau_f >= 0) cmd.request.tau_f = edit_tau_f;
            if (edit_tau_l >= 0) cmd.request.tau_l = edit_tau_l;
            if (edit_guidance >= 0) cmd.request.guidance = edit_guidance;
            if (edit_steps > 0) cmd.request.n_steps = edit_steps;
            cmd.request.seed = edit_seed;
            cmd.request.area_average_masks = !nearest_masks;
            cmd.request.zero_control = no_control;
            cmd.request.raw_text_prior = raw_prior;
            cmd.request.feature_fusion = !no_ff;
            cmd.request.latent_fusion = !no_lf;
            auto report = run_edit(cmd, experts, sched);
            std::cout << report.dump(2) << "\n";
        } else if (*evalc) {
            EvalCommand cmd;
            cmd.source_dir = eval_source;
            cmd.edited_dir = eval_edited;
            cmd.prompt = eval_prompt;
            if (!eval_ref.empty()) cmd.reference = eval_ref;
            cmd.whole_frame = whole_frame;
            std::cout << run_eval(cmd, experts).dump(2) << "\n";
        } else if (*ablate) {
            AblateCommand cmd;
            cmd.checkpoint = ab_ckpt;
            cmd.scene_dir = ab_scene;
            cmd.out_dir = ab_out;
            cmd.seed = ab_seed;
            cmd.n_seeds = ab_seeds;
            cmd.jobs = ab_jobs;
            if (!ab_ref.empty()) cmd.reference = ab_ref;
            cmd.prompt = ab_prompt;
            auto report = run_ablate(cmd, experts, sched);
            std::cout << report.dump(2) << "\n";
        } else if (*refc) {
            const ParsedAttrs attrs = parse_attrs(ref_phrase);
            require(attrs.any, "ref: no vocabulary token in '" + ref_phrase + "'; " + vocabulary_listing());
            if (attrs.shape) {
                const auto render = canonical_render(
                    *attrs.shape, attrs.color.value_or(kDefaultProtagonistColor), ref_resolution);
                save_image(render.image, ref_out);
            } else {
                require(attrs.style.has_value(), "ref: phrase names neither a protagonist nor a style");
                const auto bg = canonical_background_render(
                    *attrs.style, attrs.style_color.value_or(kDefaultBackgroundColor), ref_resolution);
                save_image(bg, ref_out);
            }
            std::cout << "{\"written\": \"" << ref_out << "\"}\n";
        }
    } catch (const NumericError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 3;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
