#include <doctest.h>

#include "semstyle/checkpoint.hpp"
#include "test_support.hpp"
#include "tiny_workspace.hpp"

using namespace semstyle;
using namespace semstyle::testing;

namespace {

// One workspace shared by the pipeline test cases, built on first use.
struct SharedWorkspace {
    TempDir dir{"semstyle-ws"};
    Workspace ws{dir.path()};
    ProjectConfig cfg = tiny_project();

    SharedWorkspace() { build_tiny_workspace(ws, cfg); }

    fs::path portrait() const { return ws.data("test") / "00000.png"; }
    fs::path reference() const { return ws.data(cfg.style) / "00001.png"; }
};

SharedWorkspace& shared() {
    static SharedWorkspace instance;
    return instance;
}

double metric(const json& report, const std::string& name) {
    for (const auto& m : report.at("metrics"))
        if (m.at("metric") == name) return m.at("value").get<double>();
    FAIL("metric " << name << " missing");
    return 0.0;
}

}  // namespace

TEST_CASE("project config round trip and partial files") {
    auto cfg = tiny_project();
    auto back = ProjectConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());

    auto partial = ProjectConfig::from_json(json{{"finetune", {{"iterations", 7}}}, {"style", "cartoon"}});
    CHECK(partial.finetune.iterations == 7);
    CHECK(partial.finetune.lambda_semantic == ProjectConfig{}.finetune.lambda_semantic);
    CHECK(partial.generator == ProjectConfig{}.generator);

    auto expect_config_error = [](const json& j) {
        try {
            ProjectConfig::from_json(j);
            FAIL("accepted " << j.dump());
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Config);
        }
    };
    expect_config_error(json{{"finetune", {{"iterations", "many"}}}});
    expect_config_error(json{{"finetune", {{"lambda_paired", -1.0}}}});
    expect_config_error(json{{"generator", {{"resolution", 48}}}});
    expect_config_error(json{{"policy", {{"truncation_psi", 2.0}}}});
}

TEST_CASE("config file resolution") {
    TempDir dir;
    Workspace ws(dir.path());
    CHECK(ws.load_config().to_json() == ProjectConfig{}.to_json());
    CHECK_THROWS_AS(ws.load_config(dir / "absent.json"), Error);
    write_json(ws.config_path(), json{{"inversion", {{"basis_k", 12}}}});
    CHECK(ws.load_config().basis_k == 12);
    write_text_atomic(dir / "broken.json", "{ not json");
    CHECK_THROWS_AS(ws.load_config(dir / "broken.json"), Error);
}

TEST_CASE("constrained fine-tuning without pairs fails before loading models") {
    TempDir dir;
    Workspace ws(dir.path());
    auto cfg = tiny_project();
    cfg.finetune.lambda_paired = 1.0;
    try {
        cmd_finetune(ws, cfg, cfg.style, {});
        FAIL("expected a config error");
    } catch (const Error& e) {
        // models/G is absent too, so a load error here would mean models were touched first
        CHECK(e.kind() == ErrorKind::Config);
    }
    CHECK_FALSE(fs::exists(ws.run("cartoon-constrained")));
}

TEST_CASE("bootstrap produces every artifact") {
    auto& s = shared();
    const auto& ws = s.ws;
    CHECK(list_images(ws.data("real")).size() == 16);
    CHECK(list_images(ws.data("test")).size() == 4);
    CHECK(list_images(ws.data("cartoon")).size() == 4);
    for (auto name : {"G", "D", "perceptual", "identity", "E_w", "E_wplus", "E_zplus"})
        CHECK(fs::exists(ws.model(name)));
    CHECK(load_generator(ws.style_dir("cartoon") / "G_star").role() == GeneratorRole::UnconstrainedFinetuned);
    CHECK(load_generator(ws.style_dir("cartoon") / "G_prime").role() == GeneratorRole::ConstrainedFinetuned);
    CHECK(fs::exists(ws.style_dir("cartoon") / "pairs" / "manifest.json"));

    auto policy = StylePolicy::from_json(read_json(ws.style_dir("cartoon") / "policy.json"));
    CHECK(policy.style_id == "cartoon");
    CHECK(policy.generator_ckpt == "cartoon/G_prime");
    CHECK(policy.default_mix_indices == scaled_mix_indices(s.cfg.generator.layer_count()));
    CHECK(policy.truncation_psi == s.cfg.policy_psi);

    auto report = read_json(ws.run("cartoon-constrained") / "report.json");
    CHECK(report.at("role") == "constrained_finetuned");
    CHECK(report.at("generator_hash") == checkpoint_hash(ws.style_dir("cartoon") / "G_prime"));
    for (auto name : {"config.json", "log.jsonl", "report.json"}) CHECK(fs::exists(ws.run("cartoon-constrained") / name));
}

TEST_CASE("fine-tuning reruns reproduce the generator") {
    auto& s = shared();
    auto first = read_json(s.ws.run("cartoon-constrained") / "report.json");
    auto again = cmd_finetune(s.ws, s.cfg, "cartoon", {}, std::nullopt, "repeat", s.dir / "repeat_G");
    CHECK(again.at("generator_hash") == first.at("generator_hash"));
    CHECK(again.at("log_hash") == first.at("log_hash"));

    Overrides other_seed;
    other_seed.seed = 99;
    auto different = cmd_finetune(s.ws, s.cfg, "cartoon", other_seed, std::nullopt, "other", s.dir / "other_G");
    CHECK(different.at("generator_hash") != first.at("generator_hash"));
}

TEST_CASE("make-pairs resumes an existing dataset") {
    auto& s = shared();
    PairBuildStats stats;
    auto report = cmd_make_pairs(s.ws, s.cfg, "cartoon", {}, &stats);
    CHECK(stats.resumed == 4);
    CHECK(stats.optimization_steps == 0);
    CHECK(report.at("dataset_hash") == read_json(s.ws.run("cartoon-pairs") / "report.json").at("dataset_hash"));
}

TEST_CASE("stylize and mix") {
    auto& s = shared();
    const auto L = s.cfg.generator.layer_count();
    auto general = cmd_stylize(s.ws, s.cfg, "cartoon", s.portrait(), s.dir / "general.png", {});
    CHECK(fs::exists(s.dir / "general.png"));
    CHECK(general.at("image_hash") == sha256_file(s.dir / "general.png"));

    Overrides full;
    full.k = L;
    auto mixed = cmd_mix(s.ws, s.cfg, "cartoon", s.portrait(), s.dir / "mix_full.png", full);
    CHECK(mixed.at("image_hash") == general.at("image_hash"));

    auto noise_a = cmd_mix(s.ws, s.cfg, "cartoon", s.portrait(), s.dir / "a.png", {});
    CHECK(noise_a.at("k") == scaled_mix_indices(L).front());
    Overrides seeded;
    seeded.seed = 3;
    auto noise_b = cmd_mix(s.ws, s.cfg, "cartoon", s.portrait(), s.dir / "b.png", seeded);
    CHECK(noise_a.at("image_hash") != noise_b.at("image_hash"));

    Overrides bad_k;
    bad_k.k = L + 1;
    CHECK_THROWS_AS(cmd_mix(s.ws, s.cfg, "cartoon", s.portrait(), s.dir / "c.png", bad_k), Error);
    CHECK_THROWS_AS(cmd_stylize(s.ws, s.cfg, "sketch", s.portrait(), s.dir / "d.png", {}), Error);
}

TEST_CASE("reference inversion is cached and feeds mixing") {
    auto& s = shared();
    try {
        cmd_mix(s.ws, s.cfg, "cartoon", s.portrait(), s.dir / "r.png", {}, "unknown");
        FAIL("expected not found");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NotFound);
    }
    auto first = cmd_invert_ref(s.ws, s.cfg, "cartoon", s.reference(), {});
    CHECK(first.at("inversion_steps") == s.cfg.inversion.iters);
    auto second = cmd_invert_ref(s.ws, s.cfg, "cartoon", s.reference(), {});
    CHECK(second.at("cache_hit") == true);
    CHECK(second.at("inversion_steps") == 0);
    CHECK(second.at("reference_id") == first.at("reference_id"));

    const auto id = first.at("reference_id").get<std::string>();
    Overrides full;
    full.k = s.cfg.generator.layer_count();
    auto ref_full = cmd_mix(s.ws, s.cfg, "cartoon", s.portrait(), s.dir / "rf.png", full, id);
    auto general = cmd_stylize(s.ws, s.cfg, "cartoon", s.portrait(), s.dir / "g.png", {});
    CHECK(ref_full.at("image_hash") == general.at("image_hash"));
    CHECK(ref_full.at("mode") == "reference");
}

TEST_CASE("evaluate reports every metric") {
    auto& s = shared();
    auto report = cmd_evaluate(s.ws, s.cfg, "cartoon");
    CHECK(report.at("role") == "constrained_finetuned");
    for (auto name : {"fid_samples", "fid_stylized", "semantic_distance", "perceptual", "identity"}) {
        CAPTURE(name);
        CHECK(metric(report, name) >= 0.0);
        CHECK(std::isfinite(metric(report, name)));
    }
    for (const auto& m : report.at("metrics")) {
        CHECK(m.contains("extractor_id"));
        CHECK(m.contains("n"));
        CHECK(m.contains("seed"));
    }
    auto star = cmd_evaluate(s.ws, s.cfg, "cartoon", s.ws.style_dir("cartoon") / "G_star");
    CHECK(star.at("role") == "unconstrained_finetuned");
    auto again = cmd_evaluate(s.ws, s.cfg, "cartoon");
    CHECK(again.at("metrics") == report.at("metrics"));
}

TEST_CASE("study harnesses") {
    auto& s = shared();
    auto content = cmd_study_content_space(s.ws, s.cfg, "cartoon", {});
    REQUIRE(content.at("rows").size() == 3);
    CHECK(content.at("rows")[0].at("content_space") == "W");

    auto refs = cmd_study_ref_space(s.ws, s.cfg, "cartoon", {});
    REQUIRE(refs.at("rows").size() == 4);
    for (const auto& row : refs.at("rows"))
        CHECK(row.at("final_loss").get<double>() <= row.at("initial_loss").get<double>());

    auto levels = cmd_study_pair_level(s.ws, s.cfg, "cartoon", {});
    REQUIRE(levels.at("rows").size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(levels.at("rows")[i].at("level") == i + 1);
    CHECK(fs::exists(s.ws.run("study-pair-level-cartoon") / "table.json"));

    auto sweep = cmd_study_sweep(s.ws, s.cfg, "cartoon", "lambda_paired", {});
    CHECK(sweep.at("rows").size() == s.cfg.study.lambda_paired_values.size());
    CHECK_THROWS_AS(cmd_study_sweep(s.ws, s.cfg, "cartoon", "lambda_id", {}), Error);
}
