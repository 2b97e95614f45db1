#include "tractscope/cnn_reference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tractscope/errors.hpp"

namespace tractscope::cnn::reference {

Tensor conv2d(const Tensor& input, const ConvLayer& layer) {
    if (input.dims.size() != 3) throw InputError("reference conv2d expects (C,H,W)");
    int64_t in_ch = input.dims[0], in_h = input.dims[1], in_w = input.dims[2];
    if (in_ch != layer.in_ch) throw InputError("reference conv2d channel mismatch");
    if (in_h + 2 * static_cast<int64_t>(layer.pad) < layer.kh ||
        in_w + 2 * static_cast<int64_t>(layer.pad) < layer.kw)
        throw InputError("reference conv2d kernel larger than padded input");
    int64_t out_h = (in_h + 2 * layer.pad - layer.kh) / layer.stride + 1;
    int64_t out_w = (in_w + 2 * layer.pad - layer.kw) / layer.stride + 1;

    Tensor out = Tensor::zeros({layer.out_ch, static_cast<size_t>(out_h),
                                static_cast<size_t>(out_w)});
    for (int64_t m = 0; m < layer.out_ch; ++m) {
        for (int64_t oy = 0; oy < out_h; ++oy) {
            for (int64_t ox = 0; ox < out_w; ++ox) {
                double acc = layer.bias[m];
                for (int64_t c = 0; c < in_ch; ++c) {
                    for (int64_t dy = 0; dy < layer.kh; ++dy) {
                        int64_t sy = oy * layer.stride + dy - layer.pad;
                        if (sy < 0 || sy >= in_h) continue;
                        for (int64_t dx = 0; dx < layer.kw; ++dx) {
                            int64_t sx = ox * layer.stride + dx - layer.pad;
                            if (sx < 0 || sx >= in_w) continue;
                            double wv = layer.weights[((m * in_ch + c) * layer.kh + dy) * layer.kw +
                                                      dx];
                            double iv = input.data[(c * in_h + sy) * in_w + sx];
                            acc += wv * iv;
                        }
                    }
                }
                out.data[(m * out_h + oy) * out_w + ox] = static_cast<float>(acc);
            }
        }
    }
    return out;
}

Tensor max_pool(const Tensor& input, const MaxPoolLayer& layer) {
    if (input.dims.size() != 3) throw InputError("reference max_pool expects (C,H,W)");
    if (layer.pad >= layer.k) throw InputError("reference max_pool pad must be below window");
    int64_t ch = input.dims[0], in_h = input.dims[1], in_w = input.dims[2];
    if (in_h + 2 * static_cast<int64_t>(layer.pad) < layer.k ||
        in_w + 2 * static_cast<int64_t>(layer.pad) < layer.k)
        throw InputError("reference max_pool window larger than padded input");
    int64_t out_h = (in_h + 2 * layer.pad - layer.k) / layer.stride + 1;
    int64_t out_w = (in_w + 2 * layer.pad - layer.k) / layer.stride + 1;

    Tensor out = Tensor::zeros({static_cast<size_t>(ch), static_cast<size_t>(out_h),
                                static_cast<size_t>(out_w)});
    for (int64_t c = 0; c < ch; ++c) {
        for (int64_t oy = 0; oy < out_h; ++oy) {
            for (int64_t ox = 0; ox < out_w; ++ox) {
                float best = -std::numeric_limits<float>::infinity();
                for (int64_t dy = 0; dy < layer.k; ++dy) {
                    for (int64_t dx = 0; dx < layer.k; ++dx) {
                        int64_t sy = oy * layer.stride + dy - layer.pad;
                        int64_t sx = ox * layer.stride + dx - layer.pad;
                        if (sy < 0 || sy >= in_h || sx < 0 || sx >= in_w) continue;
                        best = std::max(best, input.data[(c * in_h + sy) * in_w + sx]);
                    }
                }
                out.data[(c * out_h + oy) * out_w + ox] = best;
            }
        }
    }
    return out;
}

Tensor lrn(const Tensor& input, const LrnLayer& layer) {
    if (input.dims.size() != 3) throw InputError("reference lrn expects (C,H,W)");
    int64_t ch = input.dims[0];
    int64_t spatial = static_cast<int64_t>(input.dims[1]) * input.dims[2];
    int64_t half = layer.n / 2;
    Tensor out = Tensor::zeros(input.dims);
    for (int64_t c = 0; c < ch; ++c) {
        for (int64_t s = 0; s < spatial; ++s) {
            double sum_sq = 0.0;
            for (int64_t cc = std::max<int64_t>(0, c - half);
                 cc <= std::min<int64_t>(ch - 1, c + half); ++cc) {
                double a = input.data[cc * spatial + s];
                sum_sq += a * a;
            }
            double denom = std::pow(layer.k + (layer.alpha / layer.n) * sum_sq, layer.beta);
            out.data[c * spatial + s] = static_cast<float>(input.data[c * spatial + s] / denom);
        }
    }
    return out;
}

Tensor fully_connected(const Tensor& input, const FcLayer& layer) {
    if (input.size() != layer.in) throw InputError("reference fully_connected length mismatch");
    Tensor out = Tensor::zeros({layer.out});
    for (size_t o = 0; o < layer.out; ++o) {
        double acc = layer.bias[o];
        for (size_t i = 0; i < layer.in; ++i)
            acc += static_cast<double>(layer.weights[o * layer.in + i]) * input.data[i];
        out.data[o] = static_cast<float>(acc);
    }
    return out;
}

Tensor apply_layer(const Tensor& input, const Layer& layer) {
    return std::visit(
        [&](const auto& op) -> Tensor {
            using T = std::decay_t<decltype(op)>;
            if constexpr (std::is_same_v<T, ConvLayer>)
                return reference::conv2d(input, op);
            else if constexpr (std::is_same_v<T, ReluLayer>) {
                Tensor out = input;
                for (float& v : out.data) v = std::max(0.0f, v);
                return out;
            } else if constexpr (std::is_same_v<T, MaxPoolLayer>)
                return reference::max_pool(input, op);
            else if constexpr (std::is_same_v<T, LrnLayer>)
                return reference::lrn(input, op);
            else
                return reference::fully_connected(input, op);
        },
        layer.op);
}

FeatureVector forward_to_layer(const NetworkSpec& net, const Tensor& input,
                               const std::string& layer_name) {
    const Layer* target = net.find(layer_name);
    if (!target) throw InputError("unknown layer name '" + layer_name + "'");
    Tensor current = input;
    for (const auto& layer : net.layers) {
        current = reference::apply_layer(current, layer);
        if (&layer == target) break;
    }
    FeatureVector fv;
    fv.values = std::move(current.data);
    fv.extractor_id = "cnn-reference";
    fv.layer_name = layer_name;
    return fv;
}

}  // namespace tractscope::cnn::reference
