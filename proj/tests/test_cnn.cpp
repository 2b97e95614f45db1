#include <doctest.h>

#include <omp.h>

#include <cmath>

#include "tractscope/cnn.hpp"
#include "tractscope/cnn_reference.hpp"
#include "tractscope/errors.hpp"
#include "tractscope/rng.hpp"

using namespace tractscope;
using namespace tractscope::cnn;

namespace {

Tensor random_tensor(std::vector<size_t> dims, SplitMix64& rng) {
    Tensor t = Tensor::zeros(std::move(dims));
    for (float& v : t.data) v = static_cast<float>(rng.next_double() * 2.0 - 1.0);
    return t;
}

ConvLayer random_conv(uint32_t out_ch, uint32_t in_ch, uint32_t kh, uint32_t kw, uint32_t stride,
                      uint32_t pad, SplitMix64& rng) {
    ConvLayer conv{out_ch, in_ch, kh, kw, stride, pad, {}, {}};
    conv.weights.resize(static_cast<size_t>(out_ch) * in_ch * kh * kw);
    conv.bias.resize(out_ch);
    for (float& v : conv.weights) v = static_cast<float>(rng.next_double() - 0.5);
    for (float& v : conv.bias) v = static_cast<float>(rng.next_double() - 0.5);
    return conv;
}

FcLayer random_fc(uint32_t out, uint32_t in, SplitMix64& rng) {
    FcLayer fc{out, in, {}, {}};
    fc.weights.resize(static_cast<size_t>(out) * in);
    fc.bias.resize(out);
    for (float& v : fc.weights) v = static_cast<float>(rng.next_double() - 0.5);
    for (float& v : fc.bias) v = static_cast<float>(rng.next_double() - 0.5);
    return fc;
}

void check_close(const Tensor& a, const Tensor& b, double rel = 1e-5) {
    REQUIRE(a.dims == b.dims);
    for (size_t i = 0; i < a.data.size(); ++i) {
        double scale = std::max({std::abs(double(a.data[i])), std::abs(double(b.data[i])), 1.0});
        CHECK(std::abs(double(a.data[i]) - double(b.data[i])) <= rel * scale);
    }
}

// Tiny valid network for format tests: conv -> relu -> pool -> lrn -> fc.
NetworkSpec tiny_net(SplitMix64& rng) {
    NetworkSpec net;
    net.in_ch = 3;
    net.in_h = 8;
    net.in_w = 8;
    net.channel_means = {100.0f, 110.0f, 120.0f};
    net.layers.push_back({"conv1", random_conv(4, 3, 3, 3, 1, 1, rng)});
    net.layers.push_back({"relu1", ReluLayer{}});
    net.layers.push_back({"pool1", MaxPoolLayer{2, 2, 0}});
    net.layers.push_back({"norm1", LrnLayer{2.0f, 1e-4f, 0.75f, 3}});
    net.layers.push_back({"fc1", random_fc(6, 4 * 4 * 4, rng)});
    return net;
}

}  // namespace

TEST_CASE("conv2d single-cell case") {
    Tensor in = Tensor::zeros({1, 1, 1});
    in.data[0] = 3.0f;
    ConvLayer conv{1, 1, 1, 1, 1, 0, {2.0f}, {0.5f}};
    Tensor out = conv2d(in, conv);
    REQUIRE(out.dims == std::vector<size_t>{1, 1, 1});
    CHECK(out.data[0] == doctest::Approx(6.5));
}

TEST_CASE("conv2d output dims formula incl. 224/11/4/0 -> 54") {
    SplitMix64 rng(1);
    struct Case {
        size_t h, k, s, p, expect;
    };
    // expect = floor((h + 2p - k)/s) + 1
    std::vector<Case> cases = {{224, 11, 4, 0, 54}, {224, 3, 1, 1, 224}, {16, 3, 2, 1, 8},
                               {7, 7, 1, 0, 1},     {10, 2, 3, 0, 3},    {9, 3, 2, 0, 4},
                               {32, 5, 2, 2, 16},   {15, 4, 4, 2, 4}};
    for (const auto& c : cases) {
        ConvLayer conv = random_conv(1, 1, static_cast<uint32_t>(c.k), static_cast<uint32_t>(c.k),
                                     static_cast<uint32_t>(c.s), static_cast<uint32_t>(c.p), rng);
        Tensor in = Tensor::zeros({1, c.h, c.h});
        Tensor out = conv2d(in, conv);
        CHECK(out.dims[1] == c.expect);
        CHECK(out.dims[2] == c.expect);
    }
    ConvLayer too_big = random_conv(1, 1, 5, 5, 1, 0, rng);
    Tensor small = Tensor::zeros({1, 3, 3});
    CHECK_THROWS_AS(conv2d(small, too_big), InputError);
}

TEST_CASE("conv2d matches the naive reference on random inputs") {
    SplitMix64 rng(2);
    for (int run = 0; run < 10; ++run) {
        Tensor in = random_tensor({3, 8, 8}, rng);
        ConvLayer conv = random_conv(4, 3, 3, 3, 1 + run % 2, run % 3, rng);
        check_close(conv2d(in, conv), reference::conv2d(in, conv));
    }
}

TEST_CASE("conv2d linearity with zero bias") {
    SplitMix64 rng(3);
    ConvLayer conv = random_conv(2, 2, 3, 3, 1, 1, rng);
    std::fill(conv.bias.begin(), conv.bias.end(), 0.0f);
    Tensor x = random_tensor({2, 6, 6}, rng);
    Tensor y = random_tensor({2, 6, 6}, rng);
    float a = 1.7f, b = -0.6f;
    Tensor combo = Tensor::zeros({2, 6, 6});
    for (size_t i = 0; i < combo.data.size(); ++i)
        combo.data[i] = a * x.data[i] + b * y.data[i];
    Tensor lhs = conv2d(combo, conv);
    Tensor cx = conv2d(x, conv), cy = conv2d(y, conv);
    Tensor rhs = Tensor::zeros(lhs.dims);
    for (size_t i = 0; i < rhs.data.size(); ++i) rhs.data[i] = a * cx.data[i] + b * cy.data[i];
    check_close(lhs, rhs, 1e-5);
}

TEST_CASE("relu") {
    Tensor t = Tensor::zeros({3});
    t.data = {-1.0f, 0.0f, 2.0f};
    Tensor out = relu(t);
    CHECK(out.data == std::vector<float>{0.0f, 0.0f, 2.0f});

    SplitMix64 rng(4);
    Tensor neg = random_tensor({2, 3, 3}, rng);
    for (float& v : neg.data) v = -std::abs(v) - 0.1f;
    Tensor zeros = relu(neg);
    for (float v : zeros.data) CHECK(v == 0.0f);

    Tensor r = random_tensor({2, 3, 3}, rng);
    CHECK(relu(relu(r)).data == relu(r).data);
}

TEST_CASE("max_pool basics and naive oracle") {
    Tensor t = Tensor::zeros({1, 2, 2});
    t.data = {1.0f, 2.0f, 3.0f, 4.0f};
    Tensor out = max_pool(t, {2, 2, 0});
    REQUIRE(out.dims == std::vector<size_t>{1, 1, 1});
    CHECK(out.data[0] == 4.0f);

    Tensor constant = Tensor::zeros({2, 4, 4});
    std::fill(constant.data.begin(), constant.data.end(), 3.25f);
    for (float v : max_pool(constant, {2, 2, 1}).data) CHECK(v == 3.25f);

    SplitMix64 rng(5);
    for (int run = 0; run < 10; ++run) {
        Tensor in = random_tensor({3, 7, 9}, rng);
        MaxPoolLayer pool{static_cast<uint32_t>(2 + run % 2), static_cast<uint32_t>(1 + run % 3),
                          static_cast<uint32_t>(run % 2)};
        check_close(max_pool(in, pool), reference::max_pool(in, pool), 0.0);
    }
}

TEST_CASE("lrn degeneracies and direct-formula oracle") {
    Tensor t = Tensor::zeros({1, 2, 2});
    t.data = {1.0f, -2.0f, 3.0f, 4.0f};
    Tensor id = lrn(t, {1.0f, 0.0f, 0.9f, 1});
    check_close(id, t, 1e-6);  // alpha=0, k=1 is the identity

    // uniform input: interior channels share one value
    Tensor uniform = Tensor::zeros({4, 2, 2});
    std::fill(uniform.data.begin(), uniform.data.end(), 2.0f);
    Tensor scaled = lrn(uniform, {2.0f, 0.5f, 0.75f, 3});
    float mid = scaled.data[1 * 4];
    for (size_t c = 1; c + 1 < 4; ++c)
        for (size_t s = 0; s < 4; ++s) CHECK(scaled.data[c * 4 + s] == doctest::Approx(mid));

    SplitMix64 rng(6);
    for (int run = 0; run < 10; ++run) {
        Tensor in = random_tensor({5, 3, 3}, rng);
        LrnLayer layer{1.5f, 0.3f, 0.75f, 3};
        Tensor fast = lrn(in, layer);
        Tensor slow = reference::lrn(in, layer);
        check_close(fast, slow, 1e-6);
        // direct formula at one site
        double sum = 0.0;
        for (int c = 0; c <= 1; ++c) sum += double(in.data[c * 9]) * double(in.data[c * 9]);
        double expect = double(in.data[0]) / std::pow(1.5 + (0.3 / 3) * sum, 0.75);
        CHECK(double(fast.data[0]) == doctest::Approx(expect).epsilon(1e-6));
    }
}

TEST_CASE("fully_connected identity, all-ones and oracle") {
    FcLayer ident{3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}, {0, 0, 0}};
    Tensor in = Tensor::zeros({3});
    in.data = {1.5f, -2.0f, 0.25f};
    CHECK(fully_connected(in, ident).data == in.data);

    FcLayer ones{1, 3, {1, 1, 1}, {2.0f}};
    CHECK(fully_connected(in, ones).data[0] == doctest::Approx(1.5 - 2.0 + 0.25 + 2.0));

    SplitMix64 rng(7);
    Tensor x = random_tensor({10}, rng);
    FcLayer fc = random_fc(4, 10, rng);
    check_close(fully_connected(x, fc), reference::fully_connected(x, fc), 1e-6);

    CHECK_THROWS_AS(fully_connected(x, ident), InputError);
}

TEST_CASE("preprocess type conversion, constant resize and bilinear center") {
    NetworkSpec net;
    net.in_ch = 3;
    net.in_h = 2;
    net.in_w = 2;
    acq::RasterImage img;
    img.width = 2;
    img.height = 2;
    img.data = {10, 20, 30, 10, 20, 30, 10, 20, 30, 10, 20, 30};
    Tensor out = preprocess(img, net);
    REQUIRE(out.dims == std::vector<size_t>{3, 2, 2});
    CHECK(out.data[0] == doctest::Approx(10.0));   // R plane
    CHECK(out.data[4] == doctest::Approx(20.0));   // G plane
    CHECK(out.data[11] == doctest::Approx(30.0));  // B plane

    // 2x2 uniform to 1x1 stays the uniform value
    net.in_h = net.in_w = 1;
    Tensor one = preprocess(img, net);
    CHECK(one.data[0] == doctest::Approx(10.0));

    // rows (0,0),(255,255) down to 1x1 -> 127.5 before mean subtraction
    acq::RasterImage grad;
    grad.width = 2;
    grad.height = 2;
    grad.data = {0, 0, 0, 0, 0, 0, 255, 255, 255, 255, 255, 255};
    Tensor mid = preprocess(grad, net);
    CHECK(mid.data[0] == doctest::Approx(127.5));

    net.channel_means = {1.0f, 2.0f, 3.0f};
    Tensor shifted = preprocess(grad, net);
    CHECK(shifted.data[0] == doctest::Approx(126.5));
}

TEST_CASE("forward_to_layer prefix property and unknown layer") {
    SplitMix64 rng(8);
    NetworkSpec net = tiny_net(rng);
    Tensor in = random_tensor({3, 8, 8}, rng);

    FeatureVector first = forward_to_layer(net, in, "conv1");
    Tensor direct = conv2d(in, std::get<ConvLayer>(net.layers[0].op));
    REQUIRE(first.values.size() == direct.size());
    for (size_t i = 0; i < direct.data.size(); ++i) CHECK(first.values[i] == direct.data[i]);

    FeatureVector full = forward_to_layer(net, in, "fc1");
    CHECK(full.values.size() == 6);
    CHECK(full.layer_name == "fc1");
    for (float v : full.values) CHECK(std::isfinite(v));

    CHECK_THROWS_WITH_AS(forward_to_layer(net, in, "nope"), doctest::Contains("unknown layer"),
                         InputError);
}

TEST_CASE("two-layer toy net against hand-composed oracle") {
    // identity 1x1 conv then relu on a known input
    NetworkSpec net;
    net.in_ch = 1;
    net.in_h = 2;
    net.in_w = 2;
    net.layers.push_back({"conv", ConvLayer{1, 1, 1, 1, 1, 0, {1.0f}, {0.0f}}});
    net.layers.push_back({"act", ReluLayer{}});
    Tensor in = Tensor::zeros({1, 2, 2});
    in.data = {-1.0f, 2.0f, -3.0f, 4.0f};
    FeatureVector out = forward_to_layer(net, in, "act");
    CHECK(out.values == std::vector<float>{0.0f, 2.0f, 0.0f, 4.0f});
}

TEST_CASE("engine equivalence on 100 random small networks") {
    SplitMix64 rng(9);
    for (int run = 0; run < 100; ++run) {
        uint32_t in_ch = 1 + static_cast<uint32_t>(rng.next_below(3));
        size_t hw = 6 + rng.next_below(11);  // 6..16
        NetworkSpec net;
        net.in_ch = in_ch;
        net.in_h = net.in_w = static_cast<uint32_t>(hw);

        uint32_t ch = in_ch;
        size_t cur = hw;
        int n_layers = 1 + static_cast<int>(rng.next_below(3));
        bool flat = false;
        for (int li = 0; li < n_layers && !flat; ++li) {
            switch (rng.next_below(5)) {
                case 0: {
                    uint32_t out_ch = 1 + static_cast<uint32_t>(rng.next_below(4));
                    uint32_t k = 1 + static_cast<uint32_t>(rng.next_below(3));
                    uint32_t stride = 1 + static_cast<uint32_t>(rng.next_below(2));
                    uint32_t pad = static_cast<uint32_t>(rng.next_below(2));
                    if (cur + 2 * pad < k) break;
                    net.layers.push_back({"conv" + std::to_string(li),
                                          random_conv(out_ch, ch, k, k, stride, pad, rng)});
                    ch = out_ch;
                    cur = (cur + 2 * pad - k) / stride + 1;
                    break;
                }
                case 1:
                    net.layers.push_back({"relu" + std::to_string(li), ReluLayer{}});
                    break;
                case 2: {
                    if (cur < 2) break;
                    net.layers.push_back({"pool" + std::to_string(li), MaxPoolLayer{2, 2, 0}});
                    cur = (cur - 2) / 2 + 1;
                    break;
                }
                case 3:
                    net.layers.push_back(
                        {"norm" + std::to_string(li), LrnLayer{1.0f, 0.25f, 0.75f, 3}});
                    break;
                case 4: {
                    uint32_t in_size = static_cast<uint32_t>(ch * cur * cur);
                    net.layers.push_back(
                        {"fc" + std::to_string(li),
                         random_fc(1 + static_cast<uint32_t>(rng.next_below(8)), in_size, rng)});
                    flat = true;
                    break;
                }
            }
        }
        if (net.layers.empty()) net.layers.push_back({"relu", ReluLayer{}});

        Tensor in = random_tensor({in_ch, hw, hw}, rng);
        const std::string& last = net.layers.back().name;
        FeatureVector fast = forward_to_layer(net, in, last);
        FeatureVector slow = reference::forward_to_layer(net, in, last);
        REQUIRE(fast.values.size() == slow.values.size());
        for (size_t i = 0; i < fast.values.size(); ++i) {
            double scale = std::max(
                {std::abs(double(fast.values[i])), std::abs(double(slow.values[i])), 1.0});
            CHECK(std::abs(double(fast.values[i]) - double(slow.values[i])) <= 1e-5 * scale);
            CHECK(std::isfinite(fast.values[i]));
        }
    }
}

TEST_CASE("forward determinism across repeated runs and thread counts") {
    SplitMix64 rng(10);
    NetworkSpec net = tiny_net(rng);
    Tensor in = random_tensor({3, 8, 8}, rng);
    FeatureVector a = forward_to_layer(net, in, "fc1");
    FeatureVector b = forward_to_layer(net, in, "fc1");
    CHECK(a.values == b.values);  // bit identical

    int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    FeatureVector serial = forward_to_layer(net, in, "fc1");
    omp_set_num_threads(4);
    FeatureVector wide = forward_to_layer(net, in, "fc1");
    omp_set_num_threads(saved);
    CHECK(serial.values == a.values);
    CHECK(wide.values == a.values);
}

TEST_CASE("CNW1 round-trip is bit exact") {
    SplitMix64 rng(11);
    NetworkSpec net = tiny_net(rng);
    auto bytes = serialize_weights(net);
    NetworkSpec back = parse_weights(bytes);
    auto bytes2 = serialize_weights(back);
    CHECK(bytes == bytes2);
    REQUIRE(back.layers.size() == net.layers.size());
    CHECK(back.channel_means == net.channel_means);
    const auto& conv_a = std::get<ConvLayer>(net.layers[0].op);
    const auto& conv_b = std::get<ConvLayer>(back.layers[0].op);
    CHECK(conv_a.weights == conv_b.weights);
    CHECK(conv_a.bias == conv_b.bias);
}

TEST_CASE("CNW1 rejects bad payloads") {
    SplitMix64 rng(12);
    NetworkSpec net = tiny_net(rng);
    auto bytes = serialize_weights(net);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_WITH_AS(parse_weights(bad_magic), doctest::Contains("bad magic"), InputError);

    auto truncated = bytes;
    truncated.resize(truncated.size() / 2);
    CHECK_THROWS_WITH_AS(parse_weights(truncated), doctest::Contains("truncated"), InputError);

    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_WITH_AS(parse_weights(trailing), doctest::Contains("trailing"), InputError);

    NetworkSpec dup = net;
    dup.layers[1].name = "conv1";
    CHECK_THROWS_WITH_AS(serialize_weights(dup), doctest::Contains("duplicate layer"), InputError);

    NetworkSpec mismatch = net;
    std::get<ConvLayer>(mismatch.layers[0].op).weights.pop_back();
    CHECK_THROWS_WITH_AS(serialize_weights(mismatch), doctest::Contains("dim mismatch"),
                         InputError);
}

TEST_CASE("baseline_descriptor structure") {
    acq::RasterImage constant;
    constant.width = 16;
    constant.height = 16;
    constant.data.assign(16 * 16 * 3, 0);
    for (int i = 0; i < 16 * 16; ++i) {
        constant.data[i * 3 + 0] = 40;
        constant.data[i * 3 + 1] = 80;
        constant.data[i * 3 + 2] = 120;
    }
    FeatureVector fv = baseline_descriptor(constant);
    REQUIRE(fv.values.size() == kBaselineDim);
    // one-hot channel histograms
    CHECK(fv.values[40 / 4] == doctest::Approx(1.0));
    CHECK(fv.values[64 + 80 / 4] == doctest::Approx(1.0));
    CHECK(fv.values[128 + 120 / 4] == doctest::Approx(1.0));
    double hist_sum = 0.0;
    for (int i = 0; i < 64; ++i) hist_sum += fv.values[i];
    CHECK(hist_sum == doctest::Approx(1.0));
    // all gradient stats zero
    for (size_t i = 192; i < kBaselineDim; ++i) CHECK(fv.values[i] == 0.0f);
}

TEST_CASE("baseline_descriptor histogram ignores pixel order") {
    SplitMix64 rng(13);
    acq::RasterImage img;
    img.width = 8;
    img.height = 8;
    img.data.resize(8 * 8 * 3);
    for (auto& b : img.data) b = static_cast<uint8_t>(rng.next_below(256));

    acq::RasterImage shuffled = img;
    std::vector<size_t> order(64);
    for (size_t i = 0; i < 64; ++i) order[i] = i;
    rng.shuffle(order);
    for (size_t i = 0; i < 64; ++i)
        for (int ccc = 0; ccc < 3; ++ccc)
            shuffled.data[i * 3 + ccc] = img.data[order[i] * 3 + ccc];

    FeatureVector a = baseline_descriptor(img);
    FeatureVector b = baseline_descriptor(shuffled);
    for (size_t i = 0; i < 192; ++i) CHECK(a.values[i] == doctest::Approx(b.values[i]));
}

TEST_CASE("activation_maps shape and uniform input") {
    SplitMix64 rng(14);
    NetworkSpec net = tiny_net(rng);
    Tensor in = random_tensor({3, 8, 8}, rng);

    auto maps = activation_maps(net, in, "conv1");
    const auto& conv = std::get<ConvLayer>(net.layers[0].op);
    CHECK(maps.size() == conv.out_ch);
    for (const auto& m : maps) {
        CHECK(m.height == 8);
        CHECK(m.width == 8);
    }

    Tensor zeros = Tensor::zeros({3, 8, 8});
    auto flat_maps = activation_maps(net, zeros, "conv1");
    for (const auto& m : flat_maps) {
        float first = m.values[0];
        for (float v : m.values) CHECK(v == first);
    }

    CHECK_THROWS_WITH_AS(activation_maps(net, in, "relu1"), doctest::Contains("not a conv"),
                         InputError);
}
