#include <doctest.h>

#include <Eigen/SVD>

#include "semstyle/inversion.hpp"
#include "semstyle/synthetic_faces.hpp"
#include "test_support.hpp"

using namespace semstyle;
using namespace semstyle::testing;

namespace {

Generator tiny_generator() {
    Generator g(tiny_config(), 3);
    g.compute_w_mean(1, 500);
    return g;
}

torch::Tensor reference_image(uint64_t seed = 4) {
    std::mt19937_64 rng(seed);
    return quantize_8bit(render_face(sample_face_params(rng), FaceStyle::Cartoon, 32));
}

InversionConfig quick(int iters = 4) {
    InversionConfig c;
    c.iters = iters;
    c.lr = 0.05;
    return c;
}

}  // namespace

TEST_CASE("sefa basis matches the singular vectors of the mapping weight") {
    auto g = tiny_generator();
    const int64_t d = g.config().latent_dim;
    const int64_t k = 6;
    auto basis = sefa_basis(g, k);
    REQUIRE(basis.basis.sizes() == torch::IntArrayRef({d, k}));
    CHECK(torch::equal(basis.anchor.to(torch::kFloat32), g.w_mean().to(torch::kFloat32)));

    // Independent route: SVD of A. Directions of largest output variation are
    // the left singular vectors, with eigenvalues s^2.
    auto a = g.mapping_output_weight().to(torch::kFloat64).contiguous();
    Eigen::MatrixXd A(a.size(0), a.size(1));
    for (int64_t i = 0; i < a.size(0); ++i)
        for (int64_t j = 0; j < a.size(1); ++j) A(i, j) = a[i][j].item<double>();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullU);
    auto b = basis.basis.to(torch::kFloat64);
    for (int64_t j = 0; j < k; ++j) {
        double dot = 0.0;
        for (int64_t i = 0; i < d; ++i) dot += b[i][j].item<double>() * svd.matrixU()(i, j);
        CAPTURE(j);
        CHECK(std::abs(dot) == doctest::Approx(1.0).epsilon(1e-5));
        const double s = svd.singularValues()(j);
        CHECK(basis.eigenvalues[j].item<double>() == doctest::Approx(s * s).epsilon(1e-6));
    }
    for (int64_t j = 1; j < k; ++j) CHECK(basis.eigenvalues[j].item<double>() <= basis.eigenvalues[j - 1].item<double>());

    auto gram = b.t().mm(b);
    CHECK(max_abs_diff(gram, torch::eye(k, torch::kFloat64)) < 1e-5);
}

TEST_CASE("a full basis spans W") {
    auto g = tiny_generator();
    const int64_t d = g.config().latent_dim;
    auto basis = sefa_basis(g, d);
    auto b = basis.basis.to(torch::kFloat64);
    CHECK(max_abs_diff(b.mm(b.t()), torch::eye(d, torch::kFloat64)) < 1e-5);

    // any w is reachable: v = B^T (w - anchor)
    auto w = torch::randn({d}, make_rng(3), torch::kFloat64);
    auto v = b.t().mv(w - basis.anchor.to(torch::kFloat64));
    auto back = v_to_w(LatentCode(LatentSpace::V, v.to(torch::kFloat32).unsqueeze(0)), basis);
    CHECK(back.space() == LatentSpace::W);
    CHECK(max_abs_diff(back.values()[0], w) < 1e-4);

    CHECK_THROWS_AS(sefa_basis(g, d + 1), Error);
    CHECK_THROWS_AS(sefa_basis(g, 0), Error);
}

TEST_CASE("v codes decode as anchor plus basis combination") {
    auto g = tiny_generator();
    auto basis = sefa_basis(g, 4);
    auto v = torch::tensor({{0.5f, -1.0f, 0.0f, 2.0f}});
    auto w = v_to_w(LatentCode(LatentSpace::V, v), basis).values()[0].to(torch::kFloat64);
    auto expected = basis.anchor.to(torch::kFloat64) + basis.basis.to(torch::kFloat64).mv(v[0].to(torch::kFloat64));
    CHECK(max_abs_diff(w, expected) < 1e-5);
    CHECK_THROWS_AS(v_to_w(LatentCode(LatentSpace::V, torch::zeros({1, 5})), basis), Error);
}

TEST_CASE("inversion starting points") {
    auto g = tiny_generator();
    auto basis = sefa_basis(g, 4);
    const auto L = g.config().layer_count();
    CHECK(torch::equal(inversion_start(LatentSpace::V, g, &basis), torch::zeros({1, 4})));
    CHECK(inversion_start(LatentSpace::ZPlus, g, nullptr).abs().max().item<float>() == 0.0f);
    CHECK(inversion_start(LatentSpace::ZPlus, g, nullptr).size(0) == L);
    auto wplus = inversion_start(LatentSpace::WPlus, g, nullptr);
    CHECK(wplus.size(0) == L);
    CHECK(torch::equal(wplus[L - 1], g.w_mean()));
    CHECK(torch::equal(inversion_start(LatentSpace::W, g, nullptr)[0], g.w_mean()));
    CHECK_THROWS_AS(inversion_start(LatentSpace::V, g, nullptr), Error);
}

TEST_CASE("inversion objective gradient matches finite differences") {
    auto g = tiny_generator();
    auto basis = sefa_basis(g, 4);
    auto nets = random_loss_nets();
    auto image = reference_image();
    auto v = torch::tensor({{0.3f, -0.2f, 0.1f, 0.4f}});
    auto loss = [&] { return inversion_objective(v, image, LatentSpace::V, g, &basis, 0.1, nets); };
    CHECK(gradient_check(v, loss, 4, 1e-2) < 2e-2);

    auto w = g.w_mean().unsqueeze(0).clone();
    auto loss_w = [&] { return inversion_objective(w, image, LatentSpace::W, g, nullptr, 0.1, nets); };
    CHECK(directional_gradient_check(w, loss_w, 1e-2) < 2e-2);
}

TEST_CASE("invert returns the best iterate and records its start") {
    auto g = tiny_generator();
    auto basis = sefa_basis(g, 4);
    auto nets = random_loss_nets();
    auto image = reference_image();
    int calls = 0, last_done = 0;
    auto cfg = quick(5);
    cfg.progress = [&](int done, int total) {
        ++calls;
        last_done = done;
        CHECK(total == 5);
    };
    auto r = invert(image, g, LatentSpace::V, cfg, nets, &basis);
    CHECK(calls == 5);
    CHECK(last_done == 5);
    REQUIRE(r.loss_curve.size() == 6);
    CHECK(r.final_loss() <= r.initial_loss());
    CHECK(r.final_loss() == *std::min_element(r.loss_curve.begin(), r.loss_curve.end()));
    CHECK(r.code.space() == LatentSpace::V);
    CHECK(r.start.is_object());
    CHECK_FALSE(r.start.empty());

    // the returned code reproduces the recorded best loss
    torch::NoGradGuard guard;
    auto at_best = inversion_objective(r.code.values(), image, LatentSpace::V, g, &basis, cfg.lambda_id, nets);
    CHECK(at_best.item<double>() == doctest::Approx(r.final_loss()).epsilon(1e-5));

    CHECK_THROWS_AS(invert(image, g, LatentSpace::V, cfg, nets, nullptr), Error);
}

TEST_CASE("inversion into every space") {
    auto g = tiny_generator();
    auto basis = sefa_basis(g, 4);
    auto nets = random_loss_nets();
    auto image = reference_image();
    const int64_t L = g.config().layer_count();
    for (auto [space, rows] : {std::pair{LatentSpace::W, int64_t{1}}, std::pair{LatentSpace::WPlus, L},
                               std::pair{LatentSpace::ZPlus, L}}) {
        CAPTURE(to_string(space));
        auto r = invert(image, g, space, quick(2), nets);
        CHECK(r.code.space() == space);
        CHECK(r.code.rows() == rows);
        CHECK(r.recon.sizes() == torch::IntArrayRef({3, 32, 32}));
    }
}

TEST_CASE("reference cache") {
    TempDir dir;
    auto g = tiny_generator();
    auto basis = sefa_basis(g, 4);
    auto nets = random_loss_nets();
    auto image = reference_image();
    ReferenceCache cache(dir / "refs");
    const auto hash = reference_image_hash(image);
    CHECK(hash.size() == 64);
    CHECK(reference_image_hash(image.clone()) == hash);
    CHECK(reference_image_hash(reference_image(5)) != hash);
    CHECK_FALSE(cache.get("cartoon", hash).has_value());

    ReferenceStats first, second;
    auto a = embed_reference(image, "cartoon", g, basis, cache, quick(3), nets, &first);
    CHECK_FALSE(first.cache_hit);
    CHECK(first.inversion_steps == 3);
    auto b = embed_reference(image, "cartoon", g, basis, cache, quick(3), nets, &second);
    CHECK(second.cache_hit);
    CHECK(second.inversion_steps == 0);
    CHECK(a.v_code.bit_equal(b.v_code));
    CHECK(a.w_code.bit_equal(b.w_code));
    CHECK(b.w_code.bit_equal(v_to_w(b.v_code, basis)));
    CHECK(b.meta.at("final_loss").get<double>() <= b.meta.at("initial_loss").get<double>());

    SUBCASE("keys are per style") {
        CHECK_FALSE(cache.get("sketch", hash).has_value());
    }
    SUBCASE("a corrupt entry is a miss and is rebuilt") {
        write_text_atomic(dir / "refs" / "cartoon" / hash / "v.f32", "xx");
        CHECK_FALSE(cache.get("cartoon", hash).has_value());
        ReferenceStats third;
        embed_reference(image, "cartoon", g, basis, cache, quick(3), nets, &third);
        CHECK_FALSE(third.cache_hit);
        CHECK(cache.get("cartoon", hash).has_value());
    }
    SUBCASE("put replaces an entry whole") {
        auto changed = a;
        changed.v_code = LatentCode(LatentSpace::V, torch::ones({1, 4}));
        cache.put(changed);
        auto got = cache.get("cartoon", hash);
        REQUIRE(got.has_value());
        CHECK(got->v_code.bit_equal(changed.v_code));
        int entries = 0;
        for (const auto& e : fs::directory_iterator(dir / "refs" / "cartoon")) entries += e.is_directory();
        CHECK(entries == 1);
    }
}
