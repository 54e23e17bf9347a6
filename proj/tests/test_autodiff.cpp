#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>

#include "dsanet/conv.hpp"
#include "dsanet/gradcheck.hpp"
#include "dsanet/ops.hpp"
#include "dsanet/params.hpp"

using namespace dsanet;
using Catch::Approx;

TEST_CASE("backward of sum of squares is 2x") {
    Tensor<double> x = Tensor<double>::from({4}, {1.0, -2.0, 3.0, 0.5}, true);
    Tape<double> t;
    Tensor<double> loss = ops::sum(t, ops::mul(t, x, x));
    t.backward(loss);
    for (std::int64_t i = 0; i < 4; ++i) REQUIRE(x.grad()[static_cast<std::size_t>(i)] == Approx(2.0 * x[i]));
}

TEST_CASE("backward requires a scalar loss and a non-empty tape") {
    Tensor<double> x = Tensor<double>::from({2}, {1.0, 2.0}, true);
    Tape<double> t;
    Tensor<double> y = ops::mul(t, x, x);
    REQUIRE_THROWS_AS(t.backward(y), UsageError);
    Tape<double> empty;
    REQUIRE_THROWS_AS(empty.backward(Tensor<double>::scalar(0.0)), UsageError);
}

TEST_CASE("gradient accumulation is additive: two backwards double the grads") {
    Rng rng(3);
    Tensor<double> x = Tensor<double>::normal({6}, rng, 0.0, 1.0, true);
    Tape<double> t;
    Tensor<double> loss = ops::sum(t, ops::gelu(t, x));
    t.backward(loss);
    std::vector<double> once = x.grad();
    t.backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i)
        REQUIRE(x.grad()[i] == Approx(2.0 * once[i]).margin(1e-15));
}

TEST_CASE("parameters not on the loss path keep zero gradients") {
    ParameterStore<double> store(7);
    Tensor<double> used = store.add("used", {3}, Init::KaimingUniform, 3);
    Tensor<double> unused = store.add("unused", {3}, Init::KaimingUniform, 3);
    unused.zero_grad();
    Tape<double> t;
    Tensor<double> loss = ops::sum(t, ops::mul(t, used, used));
    t.backward(loss);
    for (double g : unused.grad()) REQUIRE(g == 0.0);
    bool any = false;
    for (double g : used.grad()) any = any || g != 0.0;
    REQUIRE(any);
}

TEST_CASE("clearing the tape drops recorded nodes") {
    Tensor<double> x = Tensor<double>::from({2}, {1.0, 2.0}, true);
    Tape<double> t;
    ops::mul(t, x, x);
    REQUIRE(t.size() > 0);
    t.clear();
    REQUIRE(t.empty());
}

TEST_CASE("grad_check on linear and gelu scalars") {
    Rng rng(11);
    SECTION("sum is exactly linear") {
        auto fn = [](Tape<double>& t, const Tensor<double>& v) { return ops::sum(t, v); };
        double err = grad_check<double>(fn, Tensor<double>::normal({5}, rng, 0.0, 1.0));
        REQUIRE(err < 1e-10);
    }
    SECTION("sum of gelu on a 4x4 input") {
        auto fn = [](Tape<double>& t, const Tensor<double>& v) {
            return ops::sum(t, ops::gelu(t, v));
        };
        double err = grad_check<double>(fn, Tensor<double>::normal({4, 4}, rng, 0.0, 1.0));
        REQUIRE(err < 1e-7);
    }
    SECTION("maxpool at an exact tie reports a large error until nudged") {
        Tensor<double> tied = Tensor<double>::full({1, 1, 2, 2}, 1.0);
        auto fn = [](Tape<double>& t, const Tensor<double>& v) {
            return ops::sum(t, ops::maxpool2d(t, v));
        };
        double err_tied = grad_check<double>(fn, tied, 1e-5);
        REQUIRE(err_tied > 1e-2);  // subgradient discontinuity at the tie point
        Tensor<double> nudged = tied.clone();
        for (std::int64_t i = 0; i < 4; ++i) nudged[i] += 0.01 * static_cast<double>(i);
        REQUIRE(grad_check<double>(fn, nudged, 1e-6) < 1e-8);
    }
}

TEST_CASE("parameter re-initialization is bitwise reproducible") {
    ParameterStore<float> a(42), b(42);
    Tensor<float> pa = a.add("block.conv.weight", {8, 4, 3, 3}, Init::KaimingUniform, 36);
    Tensor<float> pb = b.add("block.conv.weight", {8, 4, 3, 3}, Init::KaimingUniform, 36);
    REQUIRE(pa.values() == pb.values());

    // mutate then re-init restores the exact bytes
    std::vector<float> orig = pa.values();
    pa.values()[0] += 1.f;
    ParameterStore<float>::reinit(a.at(0));
    REQUIRE(pa.values() == orig);

    ParameterStore<float> c(43);
    Tensor<float> pc = c.add("block.conv.weight", {8, 4, 3, 3}, Init::KaimingUniform, 36);
    REQUIRE(pc.values() != pa.values());
}

TEST_CASE("duplicate parameter names are rejected") {
    ParameterStore<float> store(1);
    store.add("w", {2}, Init::Zeros);
    REQUIRE_THROWS_AS(store.add("w", {2}, Init::Zeros), UsageError);
}

TEST_CASE("checkpoint round trip is bitwise and validates shapes") {
    namespace fs = std::filesystem;
    const auto path = fs::temp_directory_path() / "dsanet_ckpt_test.dsaw";

    ParameterStore<float> store(5);
    store.add("enc.w", {4, 2, 3, 3}, Init::KaimingUniform, 18);
    store.add("enc.b", {4}, Init::Zeros);
    store.add("pos", {8, 16}, Init::Normal0p02);
    save_checkpoint(store, path.string());

    ParameterStore<float> loaded(99);  // different seed: values must come from the file
    loaded.add("enc.w", {4, 2, 3, 3}, Init::KaimingUniform, 18);
    loaded.add("enc.b", {4}, Init::Zeros);
    loaded.add("pos", {8, 16}, Init::Normal0p02);
    load_checkpoint(loaded, path.string());
    for (std::size_t i = 0; i < store.size(); ++i)
        REQUIRE(loaded.at(i).tensor.values() == store.at(i).tensor.values());

    SECTION("shape mismatch names the parameter and dims") {
        ParameterStore<float> bad(5);
        bad.add("enc.w", {4, 2, 5, 5}, Init::KaimingUniform, 50);
        bad.add("enc.b", {4}, Init::Zeros);
        bad.add("pos", {8, 16}, Init::Normal0p02);
        REQUIRE_THROWS_WITH(load_checkpoint(bad, path.string()),
                            Catch::Matchers::ContainsSubstring("enc.w") &&
                                Catch::Matchers::ContainsSubstring("[4x2x3x3]"));
    }
    SECTION("unknown parameter rejected") {
        ParameterStore<float> bad(5);
        bad.add("other.w", {4, 2, 3, 3}, Init::KaimingUniform, 18);
        REQUIRE_THROWS_AS(load_checkpoint(bad, path.string()), ConfigError);
    }
    SECTION("dtype mismatch rejected") {
        ParameterStore<double> bad(5);
        bad.add("enc.w", {4, 2, 3, 3}, Init::KaimingUniform, 18);
        bad.add("enc.b", {4}, Init::Zeros);
        bad.add("pos", {8, 16}, Init::Normal0p02);
        REQUIRE_THROWS_AS(load_checkpoint(bad, path.string()), ConfigError);
    }
    fs::remove(path);
}
