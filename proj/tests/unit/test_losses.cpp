#include <doctest.h>

#include <cmath>

#include "semstyle/losses.hpp"
#include "test_support.hpp"

using namespace semstyle;
using semstyle::testing::tiny_config;

namespace {

torch::Tensor random_images(int64_t n, int64_t res, uint64_t seed) {
    return torch::rand({n, 3, res, res}, make_rng(seed)).mul(2.0).sub(1.0);
}

}  // namespace

TEST_CASE("lpips") {
    auto nets = random_loss_nets();
    auto a = random_images(2, 64, 1);
    auto b = random_images(2, 64, 2);
    torch::NoGradGuard guard;

    CHECK(lpips(a, a, nets.perceptual).item<double>() == 0.0);
    auto ab = lpips(a, b, nets.perceptual).item<double>();
    auto ba = lpips(b, a, nets.perceptual).item<double>();
    CHECK(ab > 0.0);
    CHECK(std::abs(ab - ba) < 1e-7);

    // 64 px inputs are resized to 256 before extraction.
    auto a256 = resize_square(a, 256);
    auto b256 = resize_square(b, 256);
    CHECK(lpips(a256, b256, nets.perceptual).item<double>() == ab);

    CHECK_THROWS_AS(lpips(a, random_images(2, 32, 3), nets.perceptual), Error);
    CHECK_THROWS_AS(lpips(a, random_images(1, 64, 3), nets.perceptual), Error);

    auto per_sample = nets.perceptual->distance(a, b);
    CHECK(per_sample.sizes() == torch::IntArrayRef({2}));
    CHECK((per_sample >= 0).all().item<bool>());
}

TEST_CASE("perceptual net checkpoint round trip") {
    semstyle::testing::TempDir dir;
    auto nets = random_loss_nets(31, 32);
    save_perceptual_net(nets.perceptual, dir / "p");
    save_identity_net(nets.identity, dir / "i");
    auto p = load_perceptual_net(dir / "p");
    auto i = load_identity_net(dir / "i");
    auto a = random_images(1, 64, 5);
    auto b = random_images(1, 64, 6);
    torch::NoGradGuard guard;
    CHECK(torch::equal(p->distance(a, b), nets.perceptual->distance(a, b)));
    CHECK(torch::equal(i->embed(a), nets.identity->embed(a)));
}

TEST_CASE("identity loss") {
    auto nets = random_loss_nets();
    auto a = random_images(1, 64, 1);
    auto b = random_images(1, 64, 2);
    torch::NoGradGuard guard;

    auto e = nets.identity->embed(torch::cat({a, b}));
    CHECK(semstyle::testing::max_abs_diff(e.norm(2, 1), torch::ones({2})) < 1e-5);

    CHECK(identity_loss(a, a, nets.identity).item<double>() < 1e-6);

    // Hand-computed 1 - dot from the exported embeddings.
    auto ea = e[0].to(torch::kFloat64);
    auto eb = e[1].to(torch::kFloat64);
    double by_hand = 1.0 - (ea * eb).sum().item<double>();
    CHECK(std::abs(identity_loss(a, b, nets.identity).item<double>() - by_hand) < 1e-6);

    auto x = torch::zeros({1, 4});
    auto y = torch::zeros({1, 4});
    x[0][0] = 1.0f;
    y[0][1] = 1.0f;
    CHECK(embedding_distance(x, y).item<double>() == doctest::Approx(1.0));
    CHECK(embedding_distance(x, -x).item<double>() == doctest::Approx(2.0));
    CHECK(embedding_distance(x, x).item<double>() == doctest::Approx(0.0));
}

TEST_CASE("semantic, paired and total losses") {
    auto nets = random_loss_nets();
    auto a = random_images(3, 64, 8);
    auto b = random_images(3, 64, 9);
    torch::NoGradGuard guard;

    auto lp = lpips(a, b, nets.perceptual);
    auto id = identity_loss(a, b, nets.identity);
    CHECK(torch::equal(semantic_loss(a, b, 0.0, nets), lp));
    auto combined = lp.item<double>() + 0.1 * id.item<double>();
    CHECK(semantic_loss(a, b, 0.1, nets).item<double>() == doctest::Approx(combined).epsilon(1e-6));
    CHECK(semantic_loss_per_sample(a, b, 0.1, nets).mean().item<double>() == doctest::Approx(combined).epsilon(1e-5));
    CHECK_THROWS_AS(semantic_loss(a, b, -1.0, nets), Error);

    CHECK(paired_loss(a, a, nets.perceptual).item<double>() == 0.0);
    CHECK(torch::equal(paired_loss(a, b, nets.perceptual), lp));

    auto adv = torch::tensor(0.8f);
    auto sem = torch::tensor(0.3f);
    auto pair = torch::tensor(0.5f);
    CHECK(torch::equal(total_loss(adv, sem, pair, 0.0, 0.0), adv));
    CHECK(total_loss(adv, sem, pair, 1.0, 1.0).item<double>() == doctest::Approx(1.6));
    CHECK(total_loss(adv, sem, pair, 2.0, 0.5).item<double>() ==
          doctest::Approx(0.8 + 2.0 * 0.3 + 0.5 * 0.5).epsilon(1e-6));
    CHECK_THROWS_AS(total_loss(adv, sem, pair, -1.0, 0.0), Error);
}

TEST_CASE("adversarial losses") {
    auto zeros = torch::zeros({4});
    auto at_zero = adversarial_losses_from_logits(zeros, zeros);
    CHECK(at_zero.g_loss.item<double>() == doctest::Approx(std::log(2.0)));
    CHECK(at_zero.d_loss.item<double>() == doctest::Approx(2.0 * std::log(2.0)));

    double previous = std::numeric_limits<double>::infinity();
    for (float logit = -3.0f; logit <= 3.0f; logit += 0.5f) {
        auto g = adversarial_losses_from_logits(zeros, torch::full({4}, logit)).g_loss.item<double>();
        CHECK(g < previous);
        previous = g;
    }
    CHECK_THROWS_AS(adversarial_losses_from_logits(torch::zeros({0}), zeros), Error);

    Discriminator disc(tiny_config(), 4);
    auto real = random_images(2, 32, 10);
    auto fake = random_images(2, 32, 11);
    auto losses = adversarial_losses(real, fake, disc);
    CHECK(std::isfinite(losses.g_loss.item<double>()));
    CHECK(std::isfinite(losses.d_loss.item<double>()));
    CHECK(disc->forward(real).sizes() == torch::IntArrayRef({2}));
    CHECK(disc->features(real).sizes() == torch::IntArrayRef({2, DiscriminatorImpl::kFeatureDim}));

    SUBCASE("d_loss gradient matches central differences") {
        for (auto& p : disc->named_parameters()) {
            auto err = semstyle::testing::directional_gradient_check(p.value(), [&] {
                // Logits stay float32; only the scalar reduction runs in double.
                return adversarial_losses_from_logits(disc->forward(real).to(torch::kFloat64),
                                                      disc->forward(fake).to(torch::kFloat64))
                    .d_loss;
            });
            CHECK(err < 1e-2);
        }
    }

    SUBCASE("r1 penalty is finite and non-negative") {
        auto r1 = r1_penalty(real, disc).item<double>();
        CHECK(std::isfinite(r1));
        CHECK(r1 >= 0.0);
    }
}

TEST_CASE("semantic and total loss gradients with respect to a generator parameter") {
    auto config = tiny_config();
    Generator g(config, 1);
    auto g_prime = g.clone();
    {
        torch::NoGradGuard guard;
        for (auto& p : g_prime.synthesis_parameters()) p.add_(0.05 * torch::randn(p.sizes(), make_rng(3)));
    }
    g.set_requires_grad(false);
    Discriminator disc(config, 2);
    freeze(*disc);
    auto nets = random_loss_nets();
    auto z = torch::randn({2, config.latent_dim}, make_rng(5));
    auto pair_w = g.map(torch::randn({2, config.layer_count(), config.latent_dim}, make_rng(6))).detach();
    auto style = random_images(2, config.resolution, 7);
    torch::Tensor reference;
    {
        torch::NoGradGuard guard;
        reference = g.generate(z);
    }

    torch::Tensor target;
    for (auto& p : g_prime.module().named_parameters()) {
        if (p.key() == "synthesis.conv32.conv.weight") target = p.value();
    }
    REQUIRE(target.defined());

    auto semantic = [&] { return semantic_loss(reference, g_prime.generate(z), 0.1, nets).to(torch::kFloat64); };
    CHECK(semstyle::testing::gradient_check(target, semantic) < 1e-2);
    CHECK(semstyle::testing::directional_gradient_check(target, semantic) < 1e-2);

    auto total = [&] {
        auto fake = g_prime.generate(z);
        auto adv = adversarial_losses_from_logits(disc->forward(style).to(torch::kFloat64),
                                                  disc->forward(fake).to(torch::kFloat64))
                       .g_loss;
        auto sem = semantic_loss(reference, fake, 0.1, nets);
        auto pair = paired_loss(g_prime.synthesize_batch(pair_w), style, nets.perceptual);
        return total_loss(adv, sem.to(torch::kFloat64), pair.to(torch::kFloat64), 1.0, 1.0);
    };
    CHECK(semstyle::testing::directional_gradient_check(target, total) < 1e-2);
}
