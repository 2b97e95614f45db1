#include "tractscope/cnn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "tractscope/errors.hpp"
#include "tractscope/strutil.hpp"

namespace tractscope::cnn {

namespace {

struct OutDims {
    size_t h, w;
};

OutDims conv_out_dims(size_t in_h, size_t in_w, size_t kh, size_t kw, size_t stride, size_t pad,
                      const char* what) {
    if (in_h + 2 * pad < kh || in_w + 2 * pad < kw)
        throw InputError(strfmt("%s kernel %zux%zu larger than padded input %zux%zu", what, kh, kw,
                                in_h + 2 * pad, in_w + 2 * pad));
    return {(in_h + 2 * pad - kh) / stride + 1, (in_w + 2 * pad - kw) / stride + 1};
}

void require_map(const Tensor& t, const char* what) {
    if (t.dims.size() != 3)
        throw InputError(strfmt("%s expects a (C,H,W) feature map, got rank %zu", what,
                                t.dims.size()));
}

// ---- CNW1 byte-level IO ----

struct Reader {
    std::span<const uint8_t> bytes;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > bytes.size()) throw InputError("truncated weight payload");
    }
    uint8_t u8() {
        need(1);
        return bytes[pos++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v;
        std::memcpy(&v, bytes.data() + pos, 2);
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v;
        std::memcpy(&v, bytes.data() + pos, 4);
        pos += 4;
        return v;
    }
    float f32() {
        need(4);
        float v;
        std::memcpy(&v, bytes.data() + pos, 4);
        pos += 4;
        return v;
    }
    std::string str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
    std::vector<float> floats(size_t n) {
        need(n * 4);
        std::vector<float> v(n);
        std::memcpy(v.data(), bytes.data() + pos, n * 4);
        pos += n * 4;
        return v;
    }
};

struct Writer {
    std::vector<uint8_t> bytes;

    void u8(uint8_t v) { bytes.push_back(v); }
    void u16(uint16_t v) { raw(&v, 2); }
    void u32(uint32_t v) { raw(&v, 4); }
    void f32(float v) { raw(&v, 4); }
    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    void floats(const std::vector<float>& v) { raw(v.data(), v.size() * 4); }
};

enum LayerTag : uint8_t { kConv = 0, kRelu = 1, kMaxPool = 2, kLrn = 3, kFc = 4 };

}  // namespace

Tensor Tensor::zeros(std::vector<size_t> dims) {
    Tensor t;
    t.dims = std::move(dims);
    t.data.assign(t.size(), 0.0f);
    return t;
}

const Layer* NetworkSpec::find(const std::string& name) const {
    for (const auto& layer : layers)
        if (layer.name == name) return &layer;
    return nullptr;
}

void validate_network(const NetworkSpec& net) {
    if (net.in_ch == 0 || net.in_h == 0 || net.in_w == 0)
        throw InputError("network input dims must be positive");
    std::set<std::string> names;
    // flat == true once an FC has collapsed the feature map
    bool flat = false;
    uint64_t c = net.in_ch, h = net.in_h, w = net.in_w;
    for (const auto& layer : net.layers) {
        if (!names.insert(layer.name).second)
            throw InputError("duplicate layer name " + layer.name);
        if (const auto* conv = std::get_if<ConvLayer>(&layer.op)) {
            if (flat) throw InputError("dim mismatch: conv " + layer.name + " after a flat layer");
            if (conv->in_ch != c)
                throw InputError(strfmt("dim mismatch: conv %s expects %u channels, gets %llu",
                                        layer.name.c_str(), conv->in_ch,
                                        static_cast<unsigned long long>(c)));
            if (conv->stride == 0 || conv->kh == 0 || conv->kw == 0 || conv->out_ch == 0)
                throw InputError("bad conv geometry in " + layer.name);
            uint64_t want = static_cast<uint64_t>(conv->out_ch) * conv->in_ch * conv->kh * conv->kw;
            if (conv->weights.size() != want || conv->bias.size() != conv->out_ch)
                throw InputError("dim mismatch: weight sizes of conv " + layer.name);
            OutDims od = conv_out_dims(h, w, conv->kh, conv->kw, conv->stride, conv->pad,
                                       layer.name.c_str());
            c = conv->out_ch;
            h = od.h;
            w = od.w;
        } else if (const auto* pool = std::get_if<MaxPoolLayer>(&layer.op)) {
            if (flat) throw InputError("dim mismatch: pool " + layer.name + " after a flat layer");
            if (pool->k == 0 || pool->stride == 0)
                throw InputError("bad pool geometry in " + layer.name);
            if (pool->pad >= pool->k)
                throw InputError("pool pad must be smaller than window in " + layer.name);
            OutDims od =
                conv_out_dims(h, w, pool->k, pool->k, pool->stride, pool->pad, layer.name.c_str());
            h = od.h;
            w = od.w;
        } else if (const auto* norm = std::get_if<LrnLayer>(&layer.op)) {
            if (flat) throw InputError("dim mismatch: lrn " + layer.name + " after a flat layer");
            if (norm->n == 0 || norm->n % 2 == 0)
                throw InputError("LRN window must be odd in " + layer.name);
        } else if (const auto* fc = std::get_if<FcLayer>(&layer.op)) {
            uint64_t in_size = flat ? c : c * h * w;
            if (fc->in != in_size)
                throw InputError(strfmt("dim mismatch: fc %s expects %u inputs, gets %llu",
                                        layer.name.c_str(), fc->in,
                                        static_cast<unsigned long long>(in_size)));
            if (fc->weights.size() != static_cast<uint64_t>(fc->out) * fc->in ||
                fc->bias.size() != fc->out)
                throw InputError("dim mismatch: weight sizes of fc " + layer.name);
            flat = true;
            c = fc->out;
        }
        // ReLU is shape-preserving.
    }
}

NetworkSpec parse_weights(std::span<const uint8_t> bytes) {
    Reader r{bytes};
    if (r.str(4) != "CNW1") throw InputError("bad magic (expected CNW1)");
    uint32_t version = r.u32();
    if (version != 1) throw InputError(strfmt("unsupported CNW version %u", version));

    NetworkSpec net;
    net.in_ch = r.u32();
    net.in_h = r.u32();
    net.in_w = r.u32();
    for (auto& m : net.channel_means) m = r.f32();
    uint32_t layer_count = r.u32();
    if (layer_count > 10000) throw InputError("implausible layer count");

    for (uint32_t i = 0; i < layer_count; ++i) {
        uint8_t tag = r.u8();
        Layer layer;
        layer.name = r.str(r.u16());
        switch (tag) {
            case kConv: {
                ConvLayer conv;
                conv.out_ch = r.u32();
                conv.in_ch = r.u32();
                conv.kh = r.u32();
                conv.kw = r.u32();
                conv.stride = r.u32();
                conv.pad = r.u32();
                uint64_t n = static_cast<uint64_t>(conv.out_ch) * conv.in_ch * conv.kh * conv.kw;
                if (n > (1ull << 31)) throw InputError("implausible conv size in " + layer.name);
                conv.weights = r.floats(n);
                conv.bias = r.floats(conv.out_ch);
                layer.op = std::move(conv);
                break;
            }
            case kRelu:
                layer.op = ReluLayer{};
                break;
            case kMaxPool: {
                MaxPoolLayer pool;
                pool.k = r.u32();
                pool.stride = r.u32();
                pool.pad = r.u32();
                layer.op = pool;
                break;
            }
            case kLrn: {
                LrnLayer norm;
                norm.k = r.f32();
                norm.alpha = r.f32();
                norm.beta = r.f32();
                norm.n = r.u32();
                layer.op = norm;
                break;
            }
            case kFc: {
                FcLayer fc;
                fc.out = r.u32();
                fc.in = r.u32();
                uint64_t n = static_cast<uint64_t>(fc.out) * fc.in;
                if (n > (1ull << 31)) throw InputError("implausible fc size in " + layer.name);
                fc.weights = r.floats(n);
                fc.bias = r.floats(fc.out);
                layer.op = std::move(fc);
                break;
            }
            default:
                throw InputError(strfmt("unknown layer tag %u", tag));
        }
        net.layers.push_back(std::move(layer));
    }
    if (r.pos != bytes.size()) throw InputError("trailing bytes after last layer");
    validate_network(net);
    return net;
}

std::vector<uint8_t> serialize_weights(const NetworkSpec& net) {
    validate_network(net);
    Writer w;
    w.raw("CNW1", 4);
    w.u32(1);
    w.u32(net.in_ch);
    w.u32(net.in_h);
    w.u32(net.in_w);
    for (float m : net.channel_means) w.f32(m);
    w.u32(static_cast<uint32_t>(net.layers.size()));
    for (const auto& layer : net.layers) {
        std::visit(
            [&](const auto& op) {
                using T = std::decay_t<decltype(op)>;
                if constexpr (std::is_same_v<T, ConvLayer>)
                    w.u8(kConv);
                else if constexpr (std::is_same_v<T, ReluLayer>)
                    w.u8(kRelu);
                else if constexpr (std::is_same_v<T, MaxPoolLayer>)
                    w.u8(kMaxPool);
                else if constexpr (std::is_same_v<T, LrnLayer>)
                    w.u8(kLrn);
                else
                    w.u8(kFc);
            },
            layer.op);
        w.u16(static_cast<uint16_t>(layer.name.size()));
        w.raw(layer.name.data(), layer.name.size());
        if (const auto* conv = std::get_if<ConvLayer>(&layer.op)) {
            w.u32(conv->out_ch);
            w.u32(conv->in_ch);
            w.u32(conv->kh);
            w.u32(conv->kw);
            w.u32(conv->stride);
            w.u32(conv->pad);
            w.floats(conv->weights);
            w.floats(conv->bias);
        } else if (const auto* pool = std::get_if<MaxPoolLayer>(&layer.op)) {
            w.u32(pool->k);
            w.u32(pool->stride);
            w.u32(pool->pad);
        } else if (const auto* norm = std::get_if<LrnLayer>(&layer.op)) {
            w.f32(norm->k);
            w.f32(norm->alpha);
            w.f32(norm->beta);
            w.u32(norm->n);
        } else if (const auto* fc = std::get_if<FcLayer>(&layer.op)) {
            w.u32(fc->out);
            w.u32(fc->in);
            w.floats(fc->weights);
            w.floats(fc->bias);
        }
    }
    return std::move(w.bytes);
}

Tensor conv2d(const Tensor& input, const ConvLayer& layer) {
    require_map(input, "conv2d");
    size_t in_ch = input.dims[0], in_h = input.dims[1], in_w = input.dims[2];
    if (in_ch != layer.in_ch)
        throw InputError(strfmt("conv2d input has %zu channels, layer expects %u", in_ch,
                                layer.in_ch));
    OutDims od = conv_out_dims(in_h, in_w, layer.kh, layer.kw, layer.stride, layer.pad, "conv2d");
    size_t out_h = od.h, out_w = od.w;
    size_t patch = static_cast<size_t>(layer.in_ch) * layer.kh * layer.kw;
    size_t cols = out_h * out_w;

    // im2col: each output position becomes a column of the receptive field.
    std::vector<float> col(patch * cols);
    int64_t pad = layer.pad, stride = layer.stride;
#pragma omp parallel for schedule(static)
    for (size_t k = 0; k < patch; ++k) {
        size_t c = k / (layer.kh * layer.kw);
        size_t dy = (k / layer.kw) % layer.kh;
        size_t dx = k % layer.kw;
        const float* in_plane = input.data.data() + c * in_h * in_w;
        float* dst = col.data() + k * cols;
        for (size_t oy = 0; oy < out_h; ++oy) {
            int64_t sy = static_cast<int64_t>(oy) * stride + static_cast<int64_t>(dy) - pad;
            for (size_t ox = 0; ox < out_w; ++ox) {
                int64_t sx = static_cast<int64_t>(ox) * stride + static_cast<int64_t>(dx) - pad;
                bool in_bounds = sy >= 0 && sy < static_cast<int64_t>(in_h) && sx >= 0 &&
                                 sx < static_cast<int64_t>(in_w);
                dst[oy * out_w + ox] = in_bounds ? in_plane[sy * in_w + sx] : 0.0f;
            }
        }
    }

    Tensor out = Tensor::zeros({layer.out_ch, out_h, out_w});
#pragma omp parallel for collapse(2) schedule(static)
    for (size_t m = 0; m < layer.out_ch; ++m) {
        for (size_t j = 0; j < cols; ++j) {
            const float* wrow = layer.weights.data() + m * patch;
            double acc = layer.bias[m];
            for (size_t k = 0; k < patch; ++k) acc += static_cast<double>(wrow[k]) * col[k * cols + j];
            out.data[m * cols + j] = static_cast<float>(acc);
        }
    }
    return out;
}

Tensor relu(const Tensor& input) {
    Tensor out = input;
    for (float& v : out.data) v = std::max(0.0f, v);
    return out;
}

Tensor max_pool(const Tensor& input, const MaxPoolLayer& layer) {
    require_map(input, "max_pool");
    if (layer.pad >= layer.k) throw InputError("max_pool pad must be smaller than window");
    size_t ch = input.dims[0], in_h = input.dims[1], in_w = input.dims[2];
    OutDims od = conv_out_dims(in_h, in_w, layer.k, layer.k, layer.stride, layer.pad, "max_pool");
    Tensor out = Tensor::zeros({ch, od.h, od.w});
    int64_t pad = layer.pad, stride = layer.stride, k = layer.k;
#pragma omp parallel for collapse(2) schedule(static)
    for (size_t c = 0; c < ch; ++c) {
        for (size_t oy = 0; oy < od.h; ++oy) {
            const float* plane = input.data.data() + c * in_h * in_w;
            for (size_t ox = 0; ox < od.w; ++ox) {
                // padding cells never win (-inf semantics)
                float best = -std::numeric_limits<float>::infinity();
                for (int64_t dy = 0; dy < k; ++dy) {
                    int64_t sy = static_cast<int64_t>(oy) * stride + dy - pad;
                    if (sy < 0 || sy >= static_cast<int64_t>(in_h)) continue;
                    for (int64_t dx = 0; dx < k; ++dx) {
                        int64_t sx = static_cast<int64_t>(ox) * stride + dx - pad;
                        if (sx < 0 || sx >= static_cast<int64_t>(in_w)) continue;
                        best = std::max(best, plane[sy * in_w + sx]);
                    }
                }
                out.data[(c * od.h + oy) * od.w + ox] = best;
            }
        }
    }
    return out;
}

Tensor lrn(const Tensor& input, const LrnLayer& layer) {
    require_map(input, "lrn");
    if (layer.n == 0 || layer.n % 2 == 0) throw InputError("LRN window must be odd");
    size_t ch = input.dims[0], spatial = input.dims[1] * input.dims[2];
    Tensor out = Tensor::zeros(input.dims);
    int64_t half = layer.n / 2;
#pragma omp parallel for schedule(static)
    for (size_t s = 0; s < spatial; ++s) {
        for (size_t c = 0; c < ch; ++c) {
            int64_t lo = std::max<int64_t>(0, static_cast<int64_t>(c) - half);
            int64_t hi = std::min<int64_t>(ch - 1, static_cast<int64_t>(c) + half);
            double sum_sq = 0.0;
            for (int64_t cc = lo; cc <= hi; ++cc) {
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
    if (input.size() != layer.in)
        throw InputError(strfmt("fully_connected length mismatch: input %zu, layer expects %u",
                                input.size(), layer.in));
    Tensor out = Tensor::zeros({layer.out});
#pragma omp parallel for schedule(static)
    for (size_t o = 0; o < layer.out; ++o) {
        const float* wrow = layer.weights.data() + o * layer.in;
        double acc = layer.bias[o];
        for (size_t i = 0; i < layer.in; ++i)
            acc += static_cast<double>(wrow[i]) * input.data[i];
        out.data[o] = static_cast<float>(acc);
    }
    return out;
}

Tensor apply_layer(const Tensor& input, const Layer& layer) {
    return std::visit(
        [&](const auto& op) -> Tensor {
            using T = std::decay_t<decltype(op)>;
            if constexpr (std::is_same_v<T, ConvLayer>)
                return conv2d(input, op);
            else if constexpr (std::is_same_v<T, ReluLayer>)
                return relu(input);
            else if constexpr (std::is_same_v<T, MaxPoolLayer>)
                return max_pool(input, op);
            else if constexpr (std::is_same_v<T, LrnLayer>)
                return lrn(input, op);
            else
                return fully_connected(input, op);
        },
        layer.op);
}

Tensor preprocess(const acq::RasterImage& image, const NetworkSpec& net) {
    if (image.width < 1 || image.height < 1) throw InputError("empty image");
    size_t out_h = net.in_h, out_w = net.in_w;
    Tensor out = Tensor::zeros({3, out_h, out_w});
    double scale_y = static_cast<double>(image.height) / static_cast<double>(out_h);
    double scale_x = static_cast<double>(image.width) / static_cast<double>(out_w);
#pragma omp parallel for collapse(2) schedule(static)
    for (size_t c = 0; c < 3; ++c) {
        for (size_t y = 0; y < out_h; ++y) {
            // half-pixel-center sampling
            double sy = std::clamp((y + 0.5) * scale_y - 0.5, 0.0, image.height - 1.0);
            size_t y0 = static_cast<size_t>(sy);
            size_t y1 = std::min(y0 + 1, static_cast<size_t>(image.height - 1));
            double fy = sy - static_cast<double>(y0);
            for (size_t x = 0; x < out_w; ++x) {
                double sx = std::clamp((x + 0.5) * scale_x - 0.5, 0.0, image.width - 1.0);
                size_t x0 = static_cast<size_t>(sx);
                size_t x1 = std::min(x0 + 1, static_cast<size_t>(image.width - 1));
                double fx = sx - static_cast<double>(x0);
                double v00 = image.pixel(y0, x0)[c];
                double v01 = image.pixel(y0, x1)[c];
                double v10 = image.pixel(y1, x0)[c];
                double v11 = image.pixel(y1, x1)[c];
                double v = v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx + v10 * fy * (1 - fx) +
                           v11 * fy * fx;
                out.data[(c * out_h + y) * out_w + x] =
                    static_cast<float>(v - net.channel_means[c]);
            }
        }
    }
    return out;
}

FeatureVector forward_to_layer(const NetworkSpec& net, const Tensor& input,
                               const std::string& layer_name) {
    const Layer* target = net.find(layer_name);
    if (!target) throw InputError("unknown layer name '" + layer_name + "'");
    Tensor current = input;
    for (const auto& layer : net.layers) {
        current = apply_layer(current, layer);
        if (&layer == target) break;
    }
    FeatureVector fv;
    fv.values = std::move(current.data);
    fv.extractor_id = "cnn";
    fv.layer_name = layer_name;
    return fv;
}

FeatureVector baseline_descriptor(const acq::RasterImage& image) {
    FeatureVector fv;
    fv.values.assign(kBaselineDim, 0.0f);
    fv.extractor_id = "baseline";
    size_t h = image.height, w = image.width;
    size_t pixels = h * w;
    if (pixels == 0) throw InputError("empty image");

    double hist[3][64] = {};
    for (size_t y = 0; y < h; ++y) {
        for (size_t x = 0; x < w; ++x) {
            const uint8_t* p = image.pixel(y, x);
            for (int c = 0; c < 3; ++c) hist[c][p[c] >> 2] += 1.0;
        }
    }
    for (int c = 0; c < 3; ++c)
        for (int b = 0; b < 64; ++b)
            fv.values[c * 64 + b] = static_cast<float>(hist[c][b] / static_cast<double>(pixels));

    // Per quadrant: mean |dx|, mean |dy|, mean dx^2, mean dy^2 of intensity.
    double abs_dx[4] = {}, abs_dy[4] = {}, sq_dx[4] = {}, sq_dy[4] = {};
    size_t n_dx[4] = {}, n_dy[4] = {};
    auto intensity = [&](size_t y, size_t x) {
        const uint8_t* p = image.pixel(y, x);
        return (static_cast<double>(p[0]) + p[1] + p[2]) / 3.0;
    };
    for (size_t y = 0; y < h; ++y) {
        size_t qy = (2 * y >= h) ? 1 : 0;
        for (size_t x = 0; x < w; ++x) {
            size_t q = qy * 2 + ((2 * x >= w) ? 1 : 0);
            double i0 = intensity(y, x);
            if (x + 1 < w) {
                double d = intensity(y, x + 1) - i0;
                abs_dx[q] += std::abs(d);
                sq_dx[q] += d * d;
                ++n_dx[q];
            }
            if (y + 1 < h) {
                double d = intensity(y + 1, x) - i0;
                abs_dy[q] += std::abs(d);
                sq_dy[q] += d * d;
                ++n_dy[q];
            }
        }
    }
    for (int q = 0; q < 4; ++q) {
        float* slot = fv.values.data() + 192 + q * 4;
        slot[0] = n_dx[q] ? static_cast<float>(abs_dx[q] / n_dx[q]) : 0.0f;
        slot[1] = n_dy[q] ? static_cast<float>(abs_dy[q] / n_dy[q]) : 0.0f;
        slot[2] = n_dx[q] ? static_cast<float>(sq_dx[q] / n_dx[q]) : 0.0f;
        slot[3] = n_dy[q] ? static_cast<float>(sq_dy[q] / n_dy[q]) : 0.0f;
    }
    return fv;
}

std::vector<ActivationMap> activation_maps(const NetworkSpec& net, const Tensor& input,
                                           const std::string& layer_name) {
    const Layer* target = net.find(layer_name);
    if (!target) throw InputError("unknown layer name '" + layer_name + "'");
    if (!std::holds_alternative<ConvLayer>(target->op))
        throw InputError("layer '" + layer_name + "' is not a conv layer");

    Tensor current = input;
    for (size_t i = 0; i < net.layers.size(); ++i) {
        current = apply_layer(current, net.layers[i]);
        if (&net.layers[i] == target) {
            if (i + 1 < net.layers.size() &&
                std::holds_alternative<ReluLayer>(net.layers[i + 1].op))
                current = relu(current);
            break;
        }
    }
    size_t ch = current.dims[0], h = current.dims[1], w = current.dims[2];
    std::vector<ActivationMap> maps(ch);
    for (size_t c = 0; c < ch; ++c) {
        maps[c].height = h;
        maps[c].width = w;
        maps[c].values.assign(current.data.begin() + c * h * w,
                              current.data.begin() + (c + 1) * h * w);
    }
    return maps;
}

void write_activation_pgms(const std::vector<ActivationMap>& maps,
                           const std::filesystem::path& dir, const std::string& prefix) {
    std::filesystem::create_directories(dir);
    for (size_t i = 0; i < maps.size(); ++i) {
        const auto& map = maps[i];
        float lo = *std::min_element(map.values.begin(), map.values.end());
        float hi = *std::max_element(map.values.begin(), map.values.end());
        float span = hi - lo;
        std::string body = strfmt("P5\n%zu %zu\n255\n", map.width, map.height);
        for (float v : map.values) {
            int byte = span > 1e-20f ? static_cast<int>(std::lround((v - lo) / span * 255.0f)) : 0;
            body.push_back(static_cast<char>(std::clamp(byte, 0, 255)));
        }
        write_file(dir / strfmt("%s_%03zu.pgm", prefix.c_str(), i), body);
    }
}

}  // namespace tractscope::cnn
