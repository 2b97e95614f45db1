// Parallel engine vs the serial reference kernels, plus the solver path.
// Run: ./tractscope_bench [--benchmark_filter=conv]

#include <benchmark/benchmark.h>

#include "tractscope/cnn.hpp"
#include "tractscope/cnn_reference.hpp"
#include "tractscope/model.hpp"
#include "tractscope/rng.hpp"

using namespace tractscope;

namespace {

cnn::Tensor random_tensor(std::vector<size_t> dims, uint64_t seed) {
    cnn::Tensor t = cnn::Tensor::zeros(std::move(dims));
    SplitMix64 rng(seed);
    for (float& v : t.data) v = static_cast<float>(rng.next_double() * 2.0 - 1.0);
    return t;
}

cnn::ConvLayer random_conv(uint32_t out_ch, uint32_t in_ch, uint32_t k, uint32_t stride,
                           uint32_t pad, uint64_t seed) {
    cnn::ConvLayer conv{out_ch, in_ch, k, k, stride, pad, {}, {}};
    SplitMix64 rng(seed);
    conv.weights.resize(static_cast<size_t>(out_ch) * in_ch * k * k);
    conv.bias.resize(out_ch);
    for (float& v : conv.weights) v = static_cast<float>(rng.next_double() - 0.5);
    for (float& v : conv.bias) v = static_cast<float>(rng.next_double() - 0.5);
    return conv;
}

// VGG-style first stage: 64 filters, 11x11, stride 4 over a 224x224 input.
void BM_conv2d_engine(benchmark::State& state) {
    auto input = random_tensor({3, 224, 224}, 1);
    auto conv = random_conv(64, 3, 11, 4, 0, 2);
    for (auto _ : state) {
        auto out = cnn::conv2d(input, conv);
        benchmark::DoNotOptimize(out.data.data());
    }
}
BENCHMARK(BM_conv2d_engine)->Unit(benchmark::kMillisecond);

void BM_conv2d_reference(benchmark::State& state) {
    auto input = random_tensor({3, 224, 224}, 1);
    auto conv = random_conv(64, 3, 11, 4, 0, 2);
    for (auto _ : state) {
        auto out = cnn::reference::conv2d(input, conv);
        benchmark::DoNotOptimize(out.data.data());
    }
}
BENCHMARK(BM_conv2d_reference)->Unit(benchmark::kMillisecond);

cnn::NetworkSpec small_net() {
    cnn::NetworkSpec net;
    net.in_ch = 3;
    net.in_h = 64;
    net.in_w = 64;
    net.layers.push_back({"conv1", random_conv(16, 3, 5, 2, 2, 3)});
    net.layers.push_back({"relu1", cnn::ReluLayer{}});
    net.layers.push_back({"pool1", cnn::MaxPoolLayer{2, 2, 0}});
    net.layers.push_back({"conv2", random_conv(32, 16, 3, 1, 1, 4)});
    net.layers.push_back({"relu2", cnn::ReluLayer{}});
    return net;
}

void BM_forward_engine(benchmark::State& state) {
    auto net = small_net();
    auto input = random_tensor({3, 64, 64}, 9);
    for (auto _ : state) {
        auto fv = cnn::forward_to_layer(net, input, "relu2");
        benchmark::DoNotOptimize(fv.values.data());
    }
}
BENCHMARK(BM_forward_engine)->Unit(benchmark::kMillisecond);

void BM_forward_reference(benchmark::State& state) {
    auto net = small_net();
    auto input = random_tensor({3, 64, 64}, 9);
    for (auto _ : state) {
        auto fv = cnn::reference::forward_to_layer(net, input, "relu2");
        benchmark::DoNotOptimize(fv.values.data());
    }
}
BENCHMARK(BM_forward_reference)->Unit(benchmark::kMillisecond);

void BM_baseline_descriptor(benchmark::State& state) {
    acq::RasterImage img;
    img.width = 400;
    img.height = 400;
    img.data.resize(static_cast<size_t>(img.width) * img.height * 3);
    SplitMix64 rng(5);
    for (auto& b : img.data) b = static_cast<uint8_t>(rng.next_below(256));
    for (auto _ : state) {
        auto fv = cnn::baseline_descriptor(img);
        benchmark::DoNotOptimize(fv.values.data());
    }
}
BENCHMARK(BM_baseline_descriptor)->Unit(benchmark::kMillisecond);

void BM_elastic_net_path(benchmark::State& state) {
    size_t n = 200, p = 208;
    SplitMix64 rng(11);
    features::DesignMatrix m;
    m.X.resize(n * p);
    for (double& v : m.X) v = rng.next_normal();
    for (size_t i = 0; i < n; ++i) {
        m.ids.push_back("T" + std::to_string(i));
        m.regions.push_back("r");
        m.y.push_back(m.X[i * p] * 2.0 + 0.3 * rng.next_normal());
    }
    for (size_t j = 0; j < p; ++j) m.columns.push_back("f" + std::to_string(j));
    model::ElasticNetConfig cfg;
    for (auto _ : state) {
        auto cv = model::kfold_cv(m, cfg);
        benchmark::DoNotOptimize(cv.mean_cv_mse.data());
    }
}
BENCHMARK(BM_elastic_net_path)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
