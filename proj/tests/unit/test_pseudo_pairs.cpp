#include <doctest.h>

#include <fstream>

#include "semstyle/pseudo_pairs.hpp"
#include "semstyle/synthetic_faces.hpp"
#include "test_support.hpp"

using namespace semstyle;
using namespace semstyle::testing;

namespace {

struct Fixture {
    Generator g{tiny_config(), 3};
    Generator g_star{tiny_config(), 3};
    Encoder e_zplus{nullptr};
    Encoder e_wplus{nullptr};
    LossNets nets = random_loss_nets();
    TempDir dir;

    Fixture() {
        g.compute_w_mean(1, 500);
        g_star = g.clone();
        // a perturbed copy stands in for the fine-tuned generator
        {
            torch::NoGradGuard guard;
            auto rng = make_rng(5);
            for (auto& p : g_star.synthesis_parameters()) p.add_(0.05 * torch::randn(p.sizes(), rng));
        }
        g_star.set_role(GeneratorRole::UnconstrainedFinetuned);
        e_zplus = make_encoder(LatentSpace::ZPlus, g, 6);
        e_wplus = make_encoder(LatentSpace::WPlus, g, 7);
        make_face_dataset(dir / "style", 3, FaceStyle::Cartoon, 9, 32);
    }

    torch::Tensor style_image(int i = 0) const {
        return quantize_8bit(load_image(dir / "style" / (std::string("0000") + std::to_string(i) + ".png"), 32));
    }

    PairBuildConfig build_config() const {
        PairBuildConfig c;
        c.iters = 3;
        c.style_name = "cartoon";
        return c;
    }
};

}  // namespace

TEST_CASE("each level follows its definition exactly") {
    Fixture f;
    auto s = f.style_image();
    torch::NoGradGuard guard;

    auto l1 = embed_level1(s, f.e_zplus, f.g);
    CHECK(l1.z1.bit_equal(encode(s, f.e_zplus)));
    CHECK(torch::equal(l1.w1.values(), map_latent(l1.z1, f.g).values()));
    CHECK(torch::equal(l1.p1, synthesize(l1.w1, f.g)));

    auto l3 = refine_level3(s, f.e_wplus, f.g);
    CHECK(l3.w3.bit_equal(encode(s, f.e_wplus)));
    CHECK(torch::equal(l3.p3, synthesize(l3.w3, f.g)));
}

TEST_CASE("level 2 optimisation") {
    Fixture f;
    auto s = f.style_image();
    auto l1 = embed_level1(s, f.e_zplus, f.g);

    SUBCASE("the returned iterate is the best visited and decodes with G") {
        auto l2 = optimize_level2(l1.z1, s, f.g_star, f.g, 6, 0.05, 0.1, f.nets);
        REQUIRE(l2.loss_curve.size() == 7);
        CHECK(l2.final_loss() <= l2.initial_loss());
        CHECK(l2.final_loss() == *std::min_element(l2.loss_curve.begin(), l2.loss_curve.end()));
        CHECK(l2.z2.space() == LatentSpace::ZPlus);
        torch::NoGradGuard guard;
        CHECK(torch::equal(l2.w2.values(), map_latent(l2.z2, f.g).values()));
        CHECK(torch::equal(l2.p2, synthesize(l2.w2, f.g)));
        // decoding through G* would give a different image
        CHECK_FALSE(torch::equal(l2.p2, synthesize(map_latent(l2.z2, f.g_star), f.g_star)));
    }
    SUBCASE("a zero step size is a fixed point") {
        auto l2 = optimize_level2(l1.z1, s, f.g_star, f.g, 2, 0.0, 0.1, f.nets);
        CHECK(l2.z2.bit_equal(l1.z1));
        CHECK(l2.w2.bit_equal(l1.w1));
        CHECK(l2.loss_curve[0] == l2.loss_curve[2]);
    }
    SUBCASE("preconditions") {
        CHECK_THROWS_AS(optimize_level2(l1.z1, s, f.g, f.g, 2, 0.05, 0.1, f.nets), Error);
        CHECK_THROWS_AS(optimize_level2(l1.w1, s, f.g_star, f.g, 2, 0.05, 0.1, f.nets), Error);
        CHECK_THROWS_AS(optimize_level2(l1.z1, s, f.g_star, f.g, 0, 0.05, 0.1, f.nets), Error);
        CHECK_THROWS_AS(embed_level1(s, f.e_wplus, f.g), Error);
        CHECK_THROWS_AS(refine_level3(s, f.e_zplus, f.g), Error);
    }
}

TEST_CASE("dataset build, reload and resume") {
    Fixture f;
    auto cfg = f.build_config();
    PairBuildStats stats;
    auto ds = build_pair_dataset(f.dir / "style", f.dir / "pairs", f.g, f.g_star, f.e_zplus, f.e_wplus, cfg, f.nets,
                                 &stats);
    CHECK(ds.samples.size() == 3);
    CHECK(stats.built == 3);
    CHECK(stats.optimization_steps == 9);
    CHECK(ds.style_name == "cartoon");

    for (const auto& s : ds.samples) {
        CAPTURE(s.id);
        CHECK(verify_sample(s, f.g).empty());
        for (auto name : {"S.png", "P1.png", "P2.png", "P3.png", "z1.f32", "z2.f32", "w1.f32", "w2.f32", "w3.f32",
                          "meta.json"})
            CHECK(fs::exists(f.dir / "pairs" / s.id / name));
        CHECK(s.meta.at("level2").at("final_loss").get<double>() <=
              s.meta.at("level2").at("initial_loss").get<double>());
    }
    for (int level : {1, 2, 3}) {
        auto set = ds.at_level(level);
        CHECK(set.size() == 3);
        CHECK(torch::equal(set.codes[1], ds.samples[1].w_at(level).values()));
    }
    CHECK_THROWS_AS(ds.at_level(4), Error);

    auto manifest = read_json(f.dir / "pairs" / "manifest.json");
    const auto hash = pair_dataset_hash(f.dir / "pairs");
    CHECK(manifest.at("hash") == hash);

    auto loaded = load_pair_dataset(f.dir / "pairs", f.g.config());
    REQUIRE(loaded.samples.size() == 3);
    CHECK(loaded.samples[0].z2.bit_equal(ds.samples[0].z2));
    CHECK(torch::equal(loaded.samples[2].p3, ds.samples[2].p3));

    SUBCASE("rerun resumes every sample without optimisation") {
        PairBuildStats again;
        build_pair_dataset(f.dir / "style", f.dir / "pairs", f.g, f.g_star, f.e_zplus, f.e_wplus, cfg, f.nets, &again);
        CHECK(again.resumed == 3);
        CHECK(again.built == 0);
        CHECK(again.optimization_steps == 0);
        CHECK(pair_dataset_hash(f.dir / "pairs") == hash);
    }
    SUBCASE("the hash detects a modified file") {
        auto path = f.dir / "pairs" / ds.samples[0].id / "z2.f32";
        auto bytes = read_bytes(path);
        bytes[4] ^= 0x01;
        write_bytes_atomic(path, bytes);
        CHECK(pair_dataset_hash(f.dir / "pairs") != hash);
    }
    SUBCASE("a tampered image fails verification") {
        auto tampered = loaded.samples[1];
        tampered.p2 = tampered.p1;
        CHECK_FALSE(verify_sample(tampered, f.g).empty());
    }
    SUBCASE("a different generator config is refused on load") {
        auto cfg2 = tiny_config();
        cfg2.latent_dim = 16;
        CHECK_THROWS_AS(load_pair_dataset(f.dir / "pairs", cfg2), Error);
    }
}

TEST_CASE("unreadable style files are skipped and recorded") {
    Fixture f;
    {
        std::ofstream bad(f.dir / "style" / "00009.png");
        bad << "not a png";
    }
    PairBuildStats stats;
    auto ds = build_pair_dataset(f.dir / "style", f.dir / "pairs", f.g, f.g_star, f.e_zplus, f.e_wplus,
                                 f.build_config(), f.nets, &stats);
    CHECK(ds.samples.size() == 3);
    REQUIRE(stats.skipped.size() == 1);
    CHECK(stats.skipped[0] == "00009.png");
    auto manifest = read_json(f.dir / "pairs" / "manifest.json");
    CHECK(manifest.at("skipped").size() == 1);
}

TEST_CASE("building pairs requires G*") {
    Fixture f;
    try {
        build_pair_dataset(f.dir / "style", f.dir / "pairs", f.g, f.g, f.e_zplus, f.e_wplus, f.build_config(), f.nets);
        FAIL("expected a config error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Config);
    }
    CHECK_THROWS_AS(build_pair_dataset(f.dir / "empty", f.dir / "pairs", f.g, f.g_star, f.e_zplus, f.e_wplus,
                                       f.build_config(), f.nets),
                    Error);
}
