// Command-line entry point: one subcommand per pipeline stage, every report
// printed to stdout as JSON.

#include <CLI11.hpp>

#include <csignal>
#include <iostream>

#include "semstyle/service.hpp"
#include "semstyle/workspace.hpp"

namespace {

using namespace semstyle;

struct GlobalFlags {
    std::string workspace = ".";
    std::string config;
    std::string style;
    std::optional<uint64_t> seed;
    std::optional<double> psi;
    std::optional<int64_t> k;
    std::optional<int> pair_level;
    std::optional<int> iters;
};

void add_global(CLI::App& app, GlobalFlags& g) {
    app.add_option("--workspace,-w", g.workspace, "Workspace root")->capture_default_str();
    app.add_option("--config", g.config, "Project config (default <workspace>/config.json)");
    app.add_option("--style", g.style, "Style name (default from config)");
    app.add_option("--seed", g.seed, "Seed override");
    app.add_option("--psi", g.psi, "Truncation psi")->check(CLI::Range(0.0, 1.0));
    app.add_option("--k", g.k, "Mixing layer index");
    app.add_option("--pair-level", g.pair_level, "Pseudo-pair level")->check(CLI::Range(1, 3));
    app.add_option("--iters", g.iters, "Iteration override")->check(CLI::PositiveNumber);
}

struct Context {
    Workspace ws;
    ProjectConfig cfg;
    std::string style;
    Overrides ov;
};

Context context(const GlobalFlags& g) {
    Workspace ws(g.workspace);
    auto cfg = ws.load_config(g.config.empty() ? std::nullopt : std::optional<fs::path>(g.config));
    Overrides ov{g.seed, g.psi, g.k, g.pair_level, g.iters};
    auto style = g.style.empty() ? cfg.style : g.style;
    return {std::move(ws), std::move(cfg), style, ov};
}

void print(const json& report) { std::cout << report.dump(2) << std::endl; }

std::function<void()> g_stop_service;

}  // namespace

int main(int argc, char** argv) {
    configure_runtime();
    CLI::App app{"semstyle: constrained StyleGAN fine-tuning for portrait stylization"};
    app.require_subcommand(1);
    app.fallthrough();
    GlobalFlags g;
    add_global(app, g);
    std::function<json()> action;

    auto* make_data = app.add_subcommand("make-data", "Render the synthetic real, test and style image sets");
    make_data->callback([&] {
        action = [&] {
            auto c = context(g);
            if (!g.style.empty()) c.cfg.style = g.style;
            if (g.seed) c.cfg.data.seed = *g.seed;
            return cmd_make_data(c.ws, c.cfg);
        };
    });

    app.add_subcommand("pretrain", "Train the real-face generator G and discriminator")->callback([&] {
        action = [&] {
            auto c = context(g);
            return cmd_pretrain(c.ws, c.cfg, c.ov);
        };
    });

    std::string encoder_space = "W";
    auto* train_enc = app.add_subcommand("train-encoder", "Train an image encoder against G");
    train_enc->add_option("--space", encoder_space, "Target space: W, WPlus or ZPlus")->capture_default_str();
    train_enc->callback([&] {
        action = [&] {
            auto c = context(g);
            return cmd_train_encoder(c.ws, c.cfg, parse_latent_space(encoder_space), c.ov);
        };
    });

    app.add_subcommand("finetune-unconstrained", "Adversarial-only fine-tuning, producing G*")->callback([&] {
        action = [&] {
            auto c = context(g);
            return cmd_finetune_unconstrained(c.ws, c.cfg, c.style, c.ov);
        };
    });

    app.add_subcommand("make-pairs", "Build the multi-level pseudo-paired dataset")->callback([&] {
        action = [&] {
            auto c = context(g);
            return cmd_make_pairs(c.ws, c.cfg, c.style, c.ov);
        };
    });

    std::string pairs_path;
    std::optional<double> lambda_semantic, lambda_paired;
    auto* ft = app.add_subcommand("finetune", "Constrained fine-tuning, producing G' and the style policy");
    ft->add_option("--pairs", pairs_path, "Pseudo-paired dataset (default <workspace>/<style>/pairs)");
    ft->add_option("--lambda-semantic", lambda_semantic, "Semantic preservation weight")->check(CLI::NonNegativeNumber);
    ft->add_option("--lambda-paired", lambda_paired, "Pseudo-paired supervision weight")->check(CLI::NonNegativeNumber);
    ft->callback([&] {
        action = [&] {
            auto c = context(g);
            if (lambda_semantic) c.cfg.finetune.lambda_semantic = *lambda_semantic;
            if (lambda_paired) c.cfg.finetune.lambda_paired = *lambda_paired;
            return cmd_finetune(c.ws, c.cfg, c.style, c.ov,
                                pairs_path.empty() ? std::nullopt : std::optional<fs::path>(pairs_path));
        };
    });

    std::string input, output;
    auto* stylize = app.add_subcommand("stylize", "General stylization of one portrait");
    stylize->add_option("--input,-i", input, "Portrait image")->required()->check(CLI::ExistingFile);
    stylize->add_option("--output,-o", output, "Output PNG")->required();
    stylize->callback([&] {
        action = [&] {
            auto c = context(g);
            return cmd_stylize(c.ws, c.cfg, c.style, input, output, c.ov);
        };
    });

    std::string reference;
    auto* mix = app.add_subcommand("mix", "Multimodal (noise) or reference-guided stylization");
    mix->add_option("--input,-i", input, "Portrait image")->required()->check(CLI::ExistingFile);
    mix->add_option("--output,-o", output, "Output PNG")->required();
    mix->add_option("--reference", reference, "Reference id from invert-ref (reference mode)");
    mix->callback([&] {
        action = [&] {
            auto c = context(g);
            return cmd_mix(c.ws, c.cfg, c.style, input, output, c.ov, reference);
        };
    });

    auto* invert_ref = app.add_subcommand("invert-ref", "Embed a reference image into V space (cached)");
    invert_ref->add_option("--input,-i", input, "Reference image")->required()->check(CLI::ExistingFile);
    invert_ref->callback([&] {
        action = [&] {
            auto c = context(g);
            return cmd_invert_ref(c.ws, c.cfg, c.style, input, c.ov);
        };
    });

    std::string generator_dir;
    auto* evaluate = app.add_subcommand("evaluate", "Metrics report for a fine-tuned generator");
    evaluate->add_option("--generator", generator_dir, "Generator checkpoint (default <style>/G_prime)");
    evaluate->callback([&] {
        action = [&] {
            auto c = context(g);
            return cmd_evaluate(c.ws, c.cfg, c.style,
                                generator_dir.empty() ? std::nullopt : std::optional<fs::path>(generator_dir), c.ov);
        };
    });

    auto* study = app.add_subcommand("study", "Experiment harnesses");
    study->require_subcommand(1);
    study->fallthrough();
    study->add_subcommand("content-space", "Content encoding in W, W+ and Z+")->callback([&] {
        action = [&] {
            auto c = context(g);
            return cmd_study_content_space(c.ws, c.cfg, c.style, c.ov);
        };
    });
    study->add_subcommand("ref-space", "Reference inversion into W+, Z+, W and V")->callback([&] {
        action = [&] {
            auto c = context(g);
            return cmd_study_ref_space(c.ws, c.cfg, c.style, c.ov);
        };
    });
    study->add_subcommand("pair-level", "Fine-tune with pair levels 1, 2, 3 and tabulate metrics")->callback([&] {
        action = [&] {
            auto c = context(g);
            return cmd_study_pair_level(c.ws, c.cfg, c.style, c.ov);
        };
    });
    std::string sweep_param = "lambda_semantic";
    std::vector<double> sweep_values;
    auto* sweep = study->add_subcommand("sweep", "Loss-weight sweep");
    sweep->add_option("--param", sweep_param, "lambda_semantic or lambda_paired")->capture_default_str();
    sweep->add_option("--values", sweep_values, "Explicit grid (default: the preset for --param)");
    sweep->callback([&] {
        action = [&] {
            auto c = context(g);
            return cmd_study_sweep(c.ws, c.cfg, c.style, sweep_param, c.ov, sweep_values);
        };
    });

    std::string host = "127.0.0.1", static_dir;
    int port = 8080, workers = 1;
    auto* serve = app.add_subcommand("serve", "Run the studio HTTP service");
    serve->add_option("--host", host)->capture_default_str();
    serve->add_option("--port", port)->capture_default_str();
    serve->add_option("--workers", workers, "Compute worker slots")->capture_default_str();
    serve->add_option("--static", static_dir, "Frontend bundle directory");
    serve->callback([&] {
        action = [&]() -> json {
            ServiceOptions opts;
            opts.workspace = g.workspace;
            if (!g.config.empty()) opts.config_file = g.config;
            opts.static_dir = static_dir;
            opts.workers = workers;
            StudioService service(opts);
            int bound = service.bind(host, port);
            log_line("service", "listening on http://" + host + ":" + std::to_string(bound));
            g_stop_service = [&service] { service.stop(); };
            std::signal(SIGINT, [](int) {
                if (g_stop_service) g_stop_service();
            });
            service.run();
            return json{{"command", "serve"}, {"stopped", true}};
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    try {
        print(action());
        return 0;
    } catch (const Error& e) {
        std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << std::endl;
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    }
}
