#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tractscope/image_codec.hpp"

namespace tractscope::cnn {

// Dense float32 array, row-major within a channel, channel-major. dims is
// (C, H, W) for feature maps or (N) for flat vectors.
struct Tensor {
    std::vector<size_t> dims;
    std::vector<float> data;

    size_t size() const {
        size_t n = 1;
        for (size_t d : dims) n *= d;
        return dims.empty() ? 0 : n;
    }
    static Tensor zeros(std::vector<size_t> dims);
};

struct ConvLayer {
    uint32_t out_ch = 0, in_ch = 0, kh = 0, kw = 0, stride = 1, pad = 0;
    std::vector<float> weights;  // out*in*kh*kw
    std::vector<float> bias;     // out
};
struct ReluLayer {};
struct MaxPoolLayer {
    uint32_t k = 0, stride = 1, pad = 0;
};
struct LrnLayer {
    float k = 1.0f, alpha = 0.0f, beta = 0.75f;
    uint32_t n = 1;  // cross-channel window, odd
};
struct FcLayer {
    uint32_t out = 0, in = 0;
    std::vector<float> weights;  // out*in
    std::vector<float> bias;     // out
};

struct Layer {
    std::string name;
    std::variant<ConvLayer, ReluLayer, MaxPoolLayer, LrnLayer, FcLayer> op;
};

struct NetworkSpec {
    uint32_t in_ch = 3, in_h = 0, in_w = 0;
    std::array<float, 3> channel_means{0.0f, 0.0f, 0.0f};
    std::vector<Layer> layers;

    const Layer* find(const std::string& name) const;
};

struct FeatureVector {
    std::vector<float> values;
    std::string extractor_id;
    std::string layer_name;
};

// --- CNW1 weight format -----------------------------------------------------

// Little-endian: magic "CNW1"; u32 version=1; u32 C,H,W; 3xf32 channel means;
// u32 layer count; per layer u8 tag (0=Conv,1=ReLU,2=MaxPool,3=LRN,4=FC),
// u16 name length + UTF-8 name, tag-specific header, then f32 weights.
NetworkSpec parse_weights(std::span<const uint8_t> bytes);
std::vector<uint8_t> serialize_weights(const NetworkSpec& net);

// Shape-propagates the layer chain; throws on any incompatibility.
void validate_network(const NetworkSpec& net);

// --- Forward kernels (OpenMP inside, bit-deterministic across thread counts;
// --- serial twins live in cnn_reference.hpp) --------------------------------

// Cross-correlation (no kernel flip), zero padding, floor dims, f64
// accumulation. im2col + matrix multiply.
Tensor conv2d(const Tensor& input, const ConvLayer& layer);
Tensor relu(const Tensor& input);
Tensor max_pool(const Tensor& input, const MaxPoolLayer& layer);
// Cross-channel: b_c = a_c / (k + (alpha/n) * sum_{c' in window(c)} a_{c'}^2)^beta
Tensor lrn(const Tensor& input, const LrnLayer& layer);
Tensor fully_connected(const Tensor& input, const FcLayer& layer);
Tensor apply_layer(const Tensor& input, const Layer& layer);

// Bilinear resize (half-pixel centers) to the network input dims, RGB order,
// per-channel mean subtraction, CHW output.
Tensor preprocess(const acq::RasterImage& image, const NetworkSpec& net);

// Applies layers in order through `layer_name` inclusive and flattens.
FeatureVector forward_to_layer(const NetworkSpec& net, const Tensor& input,
                               const std::string& layer_name);

// Weight-free 208-dim descriptor: a 64-bin histogram per RGB channel (each
// normalized to sum 1) plus 16 gradient-energy stats (mean |dx|, mean |dy|,
// mean dx^2, mean dy^2 of the intensity over a 2x2 spatial partition).
FeatureVector baseline_descriptor(const acq::RasterImage& image);
inline constexpr size_t kBaselineDim = 208;

// --- Activation maps --------------------------------------------------------

struct ActivationMap {
    size_t height = 0, width = 0;
    std::vector<float> values;
};

// One grid per output channel of the named conv layer's post-activation
// output (the ReLU directly after it, when present, is included).
std::vector<ActivationMap> activation_maps(const NetworkSpec& net, const Tensor& input,
                                           const std::string& layer_name);

// Writes `prefix_###.pgm`, each map min-max scaled to [0,255].
void write_activation_pgms(const std::vector<ActivationMap>& maps,
                           const std::filesystem::path& dir, const std::string& prefix);

}  // namespace tractscope::cnn
