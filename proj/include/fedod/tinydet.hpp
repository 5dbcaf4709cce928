#pragma once

// A miniature single-shot grid detector trained from scratch.
//
// Layer arithmetic for the default 32x32 input and a 4x4 grid:
//
//   input        3 x 32 x 32
//   conv1 3x3    C1 x 32 x 32   (padding 1) + ReLU
//   avgpool 2    C1 x 16 x 16
//   conv2 3x3    C2 x 16 x 16   (padding 1) + ReLU
//   avgpool 2    C2 x  8 x  8
//   avgpool k    C2 x  G x  G   k = image_size / (4 * grid_s) = 2
//   head 3x3     (5 + K) x G x G   (padding 1; head_kernel = 1 gives a 1x1 head)
//
// Head channels per cell: objectness, tx, ty, tw, th, then K class logits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedod/box.hpp"
#include "fedod/error.hpp"
#include "fedod/params.hpp"
#include "fedod/sample.hpp"

namespace fedod::tinydet {

struct DetectorConfig {
    int image_size = 32;
    int grid_s = 4;
    int num_classes = 2;
    int conv1_channels = 8;
    int conv2_channels = 16;
    double lambda_coord = 5.0;
    double lambda_noobj = 0.5;
    double learning_rate = 0.02;
    int batch_size = 8;
    int local_epochs = 15;
    double momentum = 0.9;
    double conf_threshold = 0.25;
    double nms_iou = 0.45;
    int head_kernel = 3;

    int head_channels() const { return 5 + num_classes; }
    int final_pool() const { return image_size / (4 * grid_s); }

    friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;
};

inline void validate(const DetectorConfig& cfg) {
    auto fail = [](const std::string& msg) { throw Error(ErrorKind::ConfigInvalid, msg); };
    if (cfg.image_size < 1 || cfg.grid_s < 1 || cfg.num_classes < 1 || cfg.conv1_channels < 1 ||
        cfg.conv2_channels < 1 || cfg.batch_size < 1 || cfg.local_epochs < 0)
        fail("all counts must be >= 1");
    if (cfg.image_size % cfg.grid_s != 0) fail("image_size must be divisible by grid_s");
    // Two fixed 2x2 pools followed by one k x k pool must land exactly on the grid.
    if (cfg.image_size % (4 * cfg.grid_s) != 0) fail("image_size must be divisible by 4 * grid_s");
    if (cfg.head_kernel != 1 && cfg.head_kernel != 3) fail("head_kernel must be 1 or 3");
    if (!(cfg.lambda_coord > 0.0) || !(cfg.lambda_noobj > 0.0)) fail("lambdas must be > 0");
    if (!(cfg.learning_rate >= 0.0) || !(cfg.momentum >= 0.0 && cfg.momentum < 1.0))
        fail("learning_rate must be >= 0 and momentum in [0, 1)");
    if (!(cfg.conf_threshold >= 0.0 && cfg.conf_threshold <= 1.0) || !(cfg.nms_iou >= 0.0 && cfg.nms_iou <= 1.0))
        fail("thresholds must lie in [0, 1]");
}

/// Raw head outputs for one grid cell.
struct CellPrediction {
    double objectness_logit = 0.0;
    double tx = 0.0;
    double ty = 0.0;
    double tw = 0.0;
    double th = 0.0;
    std::vector<double> class_logits;
};

/// Row-major grid_s x grid_s cells.
using PredictionGrid = std::vector<CellPrediction>;

template <typename T>
T sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

/// log(1 + exp(x)) without overflow.
template <typename T>
T softplus(T x) {
    return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

struct Layout {
    std::size_t w1, b1, w2, b2, w3, b3, total;

    explicit Layout(const DetectorConfig& cfg) {
        const std::size_t c1 = cfg.conv1_channels, c2 = cfg.conv2_channels, nc = cfg.head_channels();
        w1 = 0;
        b1 = w1 + c1 * 3 * 9;
        w2 = b1 + c1;
        b2 = w2 + c2 * c1 * 9;
        w3 = b2 + c2;
        b3 = w3 + nc * c2 * cfg.head_kernel * cfg.head_kernel;
        total = b3 + nc;
    }
};

/// Empty ParamSet with the detector's six tensors, in order.
inline ParamSet make_schema(const DetectorConfig& cfg) {
    validate(cfg);
    const auto c1 = static_cast<std::uint32_t>(cfg.conv1_channels);
    const auto c2 = static_cast<std::uint32_t>(cfg.conv2_channels);
    const auto nc = static_cast<std::uint32_t>(cfg.head_channels());
    ParamSet p;
    p.add(Tensor("conv1.weight", {c1, 3, 3, 3}));
    p.add(Tensor("conv1.bias", {c1}));
    p.add(Tensor("conv2.weight", {c2, c1, 3, 3}));
    p.add(Tensor("conv2.bias", {c2}));
    const auto hk = static_cast<std::uint32_t>(cfg.head_kernel);
    p.add(Tensor("head.weight", {nc, c2, hk, hk}));
    p.add(Tensor("head.bias", {nc}));
    return p;
}

inline void require_schema(const ParamSet& p, const DetectorConfig& cfg) {
    if (p.schema_hash() != make_schema(cfg).schema_hash())
        throw Error(ErrorKind::SchemaMismatch, "parameters do not match the detector architecture");
}

template <typename T>
std::vector<T> flatten(const ParamSet& p) {
    std::vector<T> out;
    out.reserve(p.total_size());
    for (const auto& t : p)
        for (float v : t.values()) out.push_back(static_cast<T>(v));
    return out;
}

template <typename T>
ParamSet unflatten(std::span<const T> flat, const ParamSet& schema) {
    ParamSet out = schema;
    std::size_t k = 0;
    for (auto& t : out)
        for (auto& v : t.values()) v = static_cast<float>(flat[k++]);
    return out;
}

/// Xavier-uniform kernels, zero biases.
inline ParamSet init_params(const DetectorConfig& cfg, Rng& rng) {
    ParamSet p = make_schema(cfg);
    for (auto& t : p) {
        if (t.rank() != 4) continue;
        const auto& d = t.dims();
        const double receptive = static_cast<double>(d[2]) * d[3];
        const double fan_in = d[1] * receptive;
        const double fan_out = d[0] * receptive;
        const double r = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-r, r));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Loss on raw head output
// ---------------------------------------------------------------------------

/// Index of the cell holding each truth center, or MultipleObjectsInCell.
inline std::vector<int> assign_cells(std::span<const BBox> truths, int grid_s) {
    std::vector<int> owner(static_cast<std::size_t>(grid_s) * grid_s, -1);
    for (std::size_t i = 0; i < truths.size(); ++i) {
        const int col = std::clamp(static_cast<int>(std::floor(truths[i].cx * grid_s)), 0, grid_s - 1);
        const int row = std::clamp(static_cast<int>(std::floor(truths[i].cy * grid_s)), 0, grid_s - 1);
        auto& slot = owner[static_cast<std::size_t>(row) * grid_s + col];
        if (slot != -1)
            throw Error(ErrorKind::MultipleObjectsInCell,
                        "cell (" + std::to_string(row) + "," + std::to_string(col) + ") holds two box centers");
        slot = static_cast<int>(i);
    }
    return owner;
}

/// Regression targets (gx, gy, gw, gh) for a truth owned by cell (row, col).
struct BoxTarget {
    double gx, gy, gw, gh;
};

inline BoxTarget encode_target(const BBox& b, int row, int col, int grid_s) {
    return {b.cx * grid_s - col, b.cy * grid_s - row, b.w, b.h};
}

/// Composite single-shot loss over channel-major head output
/// out[ch * G*G + cell]. When `dout` is non-empty it receives dL/dout.
template <typename T>
T head_loss(const DetectorConfig& cfg, std::span<const T> out, std::span<const BBox> truths, std::span<T> dout,
            std::vector<int>* responsibility = nullptr) {
    const int g = cfg.grid_s;
    const std::size_t cells = static_cast<std::size_t>(g) * g;
    const int k = cfg.num_classes;
    const T lc = static_cast<T>(cfg.lambda_coord);
    const T ln = static_cast<T>(cfg.lambda_noobj);
    const bool want_grad = !dout.empty();

    auto owner = assign_cells(truths, g);
    if (want_grad) std::fill(dout.begin(), dout.end(), T(0));
    for (const auto& t : truths)
        if (t.class_id < 0 || t.class_id >= k)
            throw Error(ErrorKind::ClassUniverseMismatch, "truth class id out of range");

    T loss = 0;
    auto at = [&](int ch, std::size_t cell) { return out[ch * cells + cell]; };
    auto grad = [&](int ch, std::size_t cell) -> T& { return dout[ch * cells + cell]; };

    for (std::size_t cell = 0; cell < cells; ++cell) {
        const T obj = at(0, cell);
        if (owner[cell] < 0) {
            loss += ln * softplus(obj);
            if (want_grad) grad(0, cell) = ln * sigmoid(obj);
            continue;
        }
        const BBox& truth = truths[owner[cell]];
        const int row = static_cast<int>(cell) / g, col = static_cast<int>(cell) % g;
        const BoxTarget tg = encode_target(truth, row, col, g);
        const T targets[4] = {T(tg.gx), T(tg.gy), T(tg.gw), T(tg.gh)};

        loss += softplus(-obj);
        if (want_grad) grad(0, cell) = sigmoid(obj) - T(1);

        for (int j = 0; j < 4; ++j) {
            const T s = sigmoid(at(1 + j, cell));
            const T diff = s - targets[j];
            loss += lc * diff * diff;
            if (want_grad) grad(1 + j, cell) = lc * T(2) * diff * s * (T(1) - s);
        }

        T m = at(5, cell);
        for (int c = 1; c < k; ++c) m = std::max(m, at(5 + c, cell));
        T denom = 0;
        for (int c = 0; c < k; ++c) denom += std::exp(at(5 + c, cell) - m);
        const T lse = m + std::log(denom);
        loss += lse - at(5 + truth.class_id, cell);
        if (want_grad)
            for (int c = 0; c < k; ++c)
                grad(5 + c, cell) = std::exp(at(5 + c, cell) - lse) - (c == truth.class_id ? T(1) : T(0));
    }
    if (responsibility) *responsibility = std::move(owner);
    return loss;
}

// ---------------------------------------------------------------------------
// Network kernels
// ---------------------------------------------------------------------------

namespace detail {

/// Eight-lane dot product; fixed summation order, vectorizes without
/// relaxed floating-point flags.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
    T acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
    T s = 0;
    for (int l = 0; l < 8; ++l) s += acc[l];
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

/// col[(ci*9 + ky*3 + kx) * h*w + y*w + x] = in[ci][y+ky-1][x+kx-1], zero outside.
template <typename T>
void im2col3x3(const T* in, int cin, int h, int w, T* col) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int ci = 0; ci < cin; ++ci)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                T* dst = col + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * plane;
                const int dx = kx - 1;
                const int xlo = std::max(0, -dx), xhi = std::min(w, w - dx);
                for (int y = 0; y < h; ++y) {
                    T* row = dst + static_cast<std::size_t>(y) * w;
                    const int iy = y + ky - 1;
                    if (iy < 0 || iy >= h) {
                        std::fill(row, row + w, T(0));
                        continue;
                    }
                    const T* src = in + ci * plane + static_cast<std::size_t>(iy) * w + dx;
                    for (int x = 0; x < xlo; ++x) row[x] = T(0);
                    for (int x = xlo; x < xhi; ++x) row[x] = src[x];
                    for (int x = xhi; x < w; ++x) row[x] = T(0);
                }
            }
}

/// Inverse scatter of im2col3x3: din += col2im(dcol).
template <typename T>
void col2im3x3(const T* dcol, int cin, int h, int w, T* din) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int ci = 0; ci < cin; ++ci)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const T* src = dcol + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * plane;
                const int dx = kx - 1;
                const int xlo = std::max(0, -dx), xhi = std::min(w, w - dx);
                for (int y = 0; y < h; ++y) {
                    const int iy = y + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    const T* row = src + static_cast<std::size_t>(y) * w;
                    T* dst = din + ci * plane + static_cast<std::size_t>(iy) * w + dx;
                    for (int x = xlo; x < xhi; ++x) dst[x] += row[x];
                }
            }
}

/// 3x3 convolution, padding 1, stride 1, via an im2col buffer that the
/// backward pass reuses.
template <typename T>
void conv3x3_forward(const T* in, int cin, int h, int w, const T* weight, const T* bias, int cout, T* out,
                     std::vector<T>& col) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t taps = static_cast<std::size_t>(cin) * 9;
    col.resize(taps * plane);
    im2col3x3(in, cin, h, w, col.data());
    for (int co = 0; co < cout; ++co) {
        T* o = out + co * plane;
        std::fill(o, o + plane, bias[co]);
        const T* wrow = weight + co * taps;
        for (std::size_t k = 0; k < taps; ++k) {
            const T wv = wrow[k];
            const T* c = col.data() + k * plane;
            for (std::size_t i = 0; i < plane; ++i) o[i] += wv * c[i];
        }
    }
}

/// Accumulates dW, db and (when din != nullptr) dIn. `col` must hold the
/// im2col buffer from the matching forward call.
template <typename T>
void conv3x3_backward(const std::vector<T>& col, int cin, int h, int w, const T* weight, int cout, const T* dout,
                      T* dweight, T* dbias, T* din, std::vector<T>& dcol) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t taps = static_cast<std::size_t>(cin) * 9;
    for (int co = 0; co < cout; ++co) {
        const T* d = dout + co * plane;
        T bsum = 0;
        for (std::size_t i = 0; i < plane; ++i) bsum += d[i];
        dbias[co] += bsum;
        T* dwrow = dweight + co * taps;
        for (std::size_t k = 0; k < taps; ++k) dwrow[k] += dot(d, col.data() + k * plane, plane);
    }
    if (!din) return;
    dcol.assign(taps * plane, T(0));
    for (int co = 0; co < cout; ++co) {
        const T* d = dout + co * plane;
        const T* wrow = weight + co * taps;
        for (std::size_t k = 0; k < taps; ++k) {
            const T wv = wrow[k];
            T* dc = dcol.data() + k * plane;
            for (std::size_t i = 0; i < plane; ++i) dc[i] += wv * d[i];
        }
    }
    col2im3x3(dcol.data(), cin, h, w, din);
}

template <typename T>
void avgpool_forward(const T* in, int channels, int h, int w, int k, T* out) {
    const int oh = h / k, ow = w / k;
    const T scale = T(1) / static_cast<T>(k * k);
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                T s = 0;
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j)
                        s += in[(static_cast<std::size_t>(c) * h + y * k + i) * w + x * k + j];
                out[(static_cast<std::size_t>(c) * oh + y) * ow + x] = s * scale;
            }
}

template <typename T>
void avgpool_backward(const T* dout, int channels, int h, int w, int k, T* din) {
    const int oh = h / k, ow = w / k;
    const T scale = T(1) / static_cast<T>(k * k);
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                din[(static_cast<std::size_t>(c) * h + y) * w + x] =
                    dout[(static_cast<std::size_t>(c) * oh + y / k) * ow + x / k] * scale;
}

}  // namespace detail

/// Forward/backward over a flat parameter vector in ParamSet order. Owns its
/// activation buffers, so one instance per thread.
template <typename T>
class Network {
public:
    explicit Network(const DetectorConfig& cfg) : cfg_(cfg), layout_(cfg) {
        validate(cfg);
        const std::size_t s = cfg.image_size, c1 = cfg.conv1_channels, c2 = cfg.conv2_channels;
        const std::size_t g = cfg.grid_s;
        x_.resize(3 * s * s);
        a1_.resize(c1 * s * s);
        p1_.resize(c1 * (s / 2) * (s / 2));
        a2_.resize(c2 * (s / 2) * (s / 2));
        p2_.resize(c2 * (s / 4) * (s / 4));
        p3_.resize(c2 * g * g);
        out_.resize(static_cast<std::size_t>(cfg.head_channels()) * g * g);
        dout_.resize(out_.size());
        dp3_.resize(p3_.size());
        dp2_.resize(p2_.size());
        da2_.resize(a2_.size());
        dp1_.resize(p1_.size());
        da1_.resize(a1_.size());
    }

    const DetectorConfig& config() const { return cfg_; }
    const Layout& layout() const { return layout_; }

    /// Channel-major head output out[ch * G*G + cell].
    std::span<const T> forward(std::span<const T> params, const Image& image) {
        check(params, image);
        const int s = cfg_.image_size, c1 = cfg_.conv1_channels, c2 = cfg_.conv2_channels, g = cfg_.grid_s;
        const std::size_t plane = static_cast<std::size_t>(s) * s;
        for (std::size_t i = 0; i < plane; ++i)
            for (int c = 0; c < 3; ++c) x_[c * plane + i] = static_cast<T>(image.pixels[i * 3 + c]);

        const T* w = params.data();
        detail::conv3x3_forward(x_.data(), 3, s, s, w + layout_.w1, w + layout_.b1, c1, a1_.data(), col1_);
        relu(a1_);
        detail::avgpool_forward(a1_.data(), c1, s, s, 2, p1_.data());
        detail::conv3x3_forward(p1_.data(), c1, s / 2, s / 2, w + layout_.w2, w + layout_.b2, c2, a2_.data(), col2_);
        relu(a2_);
        detail::avgpool_forward(a2_.data(), c2, s / 2, s / 2, 2, p2_.data());
        detail::avgpool_forward(p2_.data(), c2, s / 4, s / 4, cfg_.final_pool(), p3_.data());

        const int nc = cfg_.head_channels();
        const std::size_t cells = static_cast<std::size_t>(g) * g;
        if (cfg_.head_kernel == 3) {
            detail::conv3x3_forward(p3_.data(), c2, g, g, w + layout_.w3, w + layout_.b3, nc, out_.data(), col3_);
            return out_;
        }
        for (int o = 0; o < nc; ++o) {
            T* orow = out_.data() + o * cells;
            std::fill(orow, orow + cells, w[layout_.b3 + o]);
            for (int c = 0; c < c2; ++c) {
                const T wv = w[layout_.w3 + o * c2 + c];
                const T* prow = p3_.data() + c * cells;
                for (std::size_t i = 0; i < cells; ++i) orow[i] += wv * prow[i];
            }
        }
        return out_;
    }

    T loss(std::span<const T> params, const Image& image, std::span<const BBox> truths) {
        forward(params, image);
        return head_loss<T>(cfg_, out_, truths, {});
    }

    /// Adds dLoss/dparams into `grad`; returns the loss.
    T accumulate_gradient(std::span<const T> params, const Image& image, std::span<const BBox> truths,
                          std::span<T> grad) {
        if (grad.size() != layout_.total) throw Error(ErrorKind::ShapeMismatch, "gradient buffer size");
        forward(params, image);
        const T value = head_loss<T>(cfg_, out_, truths, dout_);

        const int s = cfg_.image_size, c1 = cfg_.conv1_channels, c2 = cfg_.conv2_channels, g = cfg_.grid_s;
        const int nc = cfg_.head_channels();
        const std::size_t cells = static_cast<std::size_t>(g) * g;
        const T* w = params.data();
        T* dw = grad.data();

        std::fill(dp3_.begin(), dp3_.end(), T(0));
        if (cfg_.head_kernel == 3)
            detail::conv3x3_backward(col3_, c2, g, g, w + layout_.w3, nc, dout_.data(), dw + layout_.w3,
                                     dw + layout_.b3, dp3_.data(), dcol_);
        else
        for (int o = 0; o < nc; ++o) {
            const T* drow = dout_.data() + o * cells;
            T bsum = 0;
            for (std::size_t i = 0; i < cells; ++i) bsum += drow[i];
            dw[layout_.b3 + o] += bsum;
            for (int c = 0; c < c2; ++c) {
                const T* prow = p3_.data() + c * cells;
                T* dprow = dp3_.data() + c * cells;
                const T wv = w[layout_.w3 + o * c2 + c];
                T acc = 0;
                for (std::size_t i = 0; i < cells; ++i) {
                    acc += drow[i] * prow[i];
                    dprow[i] += wv * drow[i];
                }
                dw[layout_.w3 + o * c2 + c] += acc;
            }
        }

        detail::avgpool_backward(dp3_.data(), c2, s / 4, s / 4, cfg_.final_pool(), dp2_.data());
        detail::avgpool_backward(dp2_.data(), c2, s / 2, s / 2, 2, da2_.data());
        relu_mask(da2_, a2_);
        std::fill(dp1_.begin(), dp1_.end(), T(0));
        detail::conv3x3_backward(col2_, c1, s / 2, s / 2, w + layout_.w2, c2, da2_.data(), dw + layout_.w2,
                                 dw + layout_.b2, dp1_.data(), dcol_);
        detail::avgpool_backward(dp1_.data(), c1, s, s, 2, da1_.data());
        relu_mask(da1_, a1_);
        detail::conv3x3_backward(col1_, 3, s, s, w + layout_.w1, c1, da1_.data(), dw + layout_.w1,
                                 dw + layout_.b1, static_cast<T*>(nullptr), dcol_);
        return value;
    }

private:
    void check(std::span<const T> params, const Image& image) const {
        if (params.size() != layout_.total) throw Error(ErrorKind::ShapeMismatch, "parameter vector size");
        if (image.size != cfg_.image_size ||
            image.pixels.size() != static_cast<std::size_t>(cfg_.image_size) * cfg_.image_size * 3)
            throw Error(ErrorKind::ShapeMismatch, "image is not " + std::to_string(cfg_.image_size) + "x" +
                                                      std::to_string(cfg_.image_size) + "x3");
    }

    static void relu(std::vector<T>& v) {
        for (auto& x : v) x = x > T(0) ? x : T(0);
    }
    // a > 0 exactly where the pre-activation was > 0.
    static void relu_mask(std::vector<T>& grad, const std::vector<T>& activation) {
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = activation[i] > T(0) ? grad[i] : T(0);
    }

    DetectorConfig cfg_;
    Layout layout_;
    std::vector<T> x_, a1_, p1_, a2_, p2_, p3_, out_;
    std::vector<T> dout_, dp3_, dp2_, da2_, dp1_, da1_;
    std::vector<T> col1_, col2_, col3_, dcol_;
};

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

inline PredictionGrid to_grid(std::span<const double> out, const DetectorConfig& cfg) {
    const std::size_t cells = static_cast<std::size_t>(cfg.grid_s) * cfg.grid_s;
    PredictionGrid grid(cells);
    for (std::size_t i = 0; i < cells; ++i) {
        auto& cp = grid[i];
        cp.objectness_logit = out[0 * cells + i];
        cp.tx = out[1 * cells + i];
        cp.ty = out[2 * cells + i];
        cp.tw = out[3 * cells + i];
        cp.th = out[4 * cells + i];
        cp.class_logits.resize(cfg.num_classes);
        for (int c = 0; c < cfg.num_classes; ++c) cp.class_logits[c] = out[(5 + c) * cells + i];
    }
    return grid;
}

inline std::vector<double> from_grid(const PredictionGrid& grid, const DetectorConfig& cfg) {
    const std::size_t cells = static_cast<std::size_t>(cfg.grid_s) * cfg.grid_s;
    if (grid.size() != cells) throw Error(ErrorKind::ShapeMismatch, "prediction grid size");
    std::vector<double> out(cells * cfg.head_channels());
    for (std::size_t i = 0; i < cells; ++i) {
        const auto& cp = grid[i];
        if (cp.class_logits.size() != static_cast<std::size_t>(cfg.num_classes))
            throw Error(ErrorKind::ShapeMismatch, "class logit count");
        out[0 * cells + i] = cp.objectness_logit;
        out[1 * cells + i] = cp.tx;
        out[2 * cells + i] = cp.ty;
        out[3 * cells + i] = cp.tw;
        out[4 * cells + i] = cp.th;
        for (int c = 0; c < cfg.num_classes; ++c) out[(5 + c) * cells + i] = cp.class_logits[c];
    }
    return out;
}

inline PredictionGrid forward(const ParamSet& p, const Image& image, const DetectorConfig& cfg) {
    require_schema(p, cfg);
    Network<float> net(cfg);
    const auto flat = flatten<float>(p);
    const auto out = net.forward(flat, image);
    std::vector<double> wide(out.begin(), out.end());
    return to_grid(wide, cfg);
}

inline Detection decode(const CellPrediction& cell, int row, int col, const DetectorConfig& cfg) {
    const double g = cfg.grid_s;
    Detection d;
    d.bbox.cx = (col + sigmoid(cell.tx)) / g;
    d.bbox.cy = (row + sigmoid(cell.ty)) / g;
    d.bbox.w = sigmoid(cell.tw);
    d.bbox.h = sigmoid(cell.th);

    int best = 0;
    for (int c = 1; c < static_cast<int>(cell.class_logits.size()); ++c)
        if (cell.class_logits[c] > cell.class_logits[best]) best = c;
    double denom = 0.0;
    for (double l : cell.class_logits) denom += std::exp(l - cell.class_logits[best]);
    const double max_prob = 1.0 / denom;

    d.class_id = best;
    d.bbox.class_id = best;
    d.confidence = std::clamp(sigmoid(cell.objectness_logit) * max_prob, 0.0, 1.0);
    return d;
}

struct LossResult {
    double value = 0.0;
    std::vector<int> responsibility;  // per cell: owning truth index or -1
};

inline LossResult loss(const PredictionGrid& grid, std::span<const BBox> truths, const DetectorConfig& cfg) {
    const auto out = from_grid(grid, cfg);
    LossResult r;
    r.value = head_loss<double>(cfg, out, truths, {}, &r.responsibility);
    return r;
}

inline ParamSet backward(const ParamSet& p, const Image& image, std::span<const BBox> truths,
                         const DetectorConfig& cfg) {
    require_schema(p, cfg);
    Network<float> net(cfg);
    const auto flat = flatten<float>(p);
    std::vector<float> grad(flat.size(), 0.0f);
    net.accumulate_gradient(flat, image, truths, grad);
    return unflatten<float>(grad, p);
}

/// Greedy per-class suppression: visit by descending confidence (stable),
/// drop any box whose IoU with an already kept same-class box exceeds
/// `iou_threshold`.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
    std::vector<Detection> kept;
    for (const auto& d : dets) {
        const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
            return k.class_id == d.class_id && iou(k.bbox, d.bbox) > iou_threshold;
        });
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

inline std::vector<Detection> detections_from_grid(const PredictionGrid& grid, const DetectorConfig& cfg,
                                                   double conf_threshold, double nms_iou) {
    std::vector<Detection> dets;
    for (int r = 0; r < cfg.grid_s; ++r)
        for (int c = 0; c < cfg.grid_s; ++c) {
            auto d = decode(grid[static_cast<std::size_t>(r) * cfg.grid_s + c], r, c, cfg);
            if (d.confidence >= conf_threshold) dets.push_back(d);
        }
    return nms(std::move(dets), nms_iou);
}

/// Reusable inference context; avoids re-flattening weights per image.
class Detector {
public:
    Detector(const ParamSet& p, const DetectorConfig& cfg) : cfg_(cfg), net_(cfg) {
        require_schema(p, cfg);
        flat_ = flatten<float>(p);
    }

    std::vector<Detection> operator()(const Image& image, double conf_threshold, double nms_iou) {
        const auto out = net_.forward(flat_, image);
        std::vector<double> wide(out.begin(), out.end());
        return detections_from_grid(to_grid(wide, cfg_), cfg_, conf_threshold, nms_iou);
    }

private:
    DetectorConfig cfg_;
    Network<float> net_;
    std::vector<float> flat_;
};

inline std::vector<Detection> infer(const ParamSet& p, const Image& image, const DetectorConfig& cfg,
                                    double conf_threshold, double nms_iou) {
    Detector det(p, cfg);
    return det(image, conf_threshold, nms_iou);
}

// ---------------------------------------------------------------------------
// Local training
// ---------------------------------------------------------------------------

struct TrainStats {
    std::vector<double> epoch_mean_loss;
};

struct TrainResult {
    ParamSet params;
    TrainStats stats;
};

/// `local_epochs` epochs of mini-batch SGD with momentum (v = mu*v + g;
/// w -= lr*v). The batch gradient is the mean of per-image gradients.
inline TrainResult train_local(const ParamSet& p, std::span<const Sample> data, const DetectorConfig& cfg,
                               Rng& rng) {
    if (data.empty()) throw Error(ErrorKind::EmptyDataset, "no training samples");
    require_schema(p, cfg);

    Network<float> net(cfg);
    std::vector<float> weights = flatten<float>(p);
    std::vector<float> velocity(weights.size(), 0.0f);
    std::vector<float> grad(weights.size(), 0.0f);
    const auto lr = static_cast<float>(cfg.learning_rate);
    const auto mu = static_cast<float>(cfg.momentum);

    std::vector<std::size_t> order(data.size());
    TrainStats stats;
    for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::fill(grad.begin(), grad.end(), 0.0f);
            for (std::size_t i = start; i < end; ++i) {
                const auto& s = data[order[i]];
                epoch_loss += net.accumulate_gradient(weights, s.image, s.boxes, grad);
            }
            const float inv = 1.0f / static_cast<float>(end - start);
            for (std::size_t j = 0; j < weights.size(); ++j) {
                velocity[j] = mu * velocity[j] + grad[j] * inv;
                weights[j] -= lr * velocity[j];
            }
        }
        stats.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(data.size()));
    }

    ParamSet out = unflatten<float>(weights, p);
    if (!out.all_finite())
        throw Error(ErrorKind::ConfigInvalid, "training diverged to non-finite weights; lower learning_rate");
    return {std::move(out), std::move(stats)};
}

}  // namespace fedod::tinydet
