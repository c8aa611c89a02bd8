#pragma once

// Neural merger: one MLP per material channel maps a Gaussian's encoded
// position and its V per-view estimates to V logits. A masked softmax turns
// the logits into view weights, and the merged value is the weighted sum of
// the per-view estimates, so it always stays inside their convex hull.
//
// Input layout per Gaussian (column):
//   [ positional encoding (6L) | position (3) | values (V·C, view-major) | seen mask (V) ]

#include "matlift/scene.hpp"

#include <Eigen/Dense>

#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <span>
#include <vector>

namespace matlift {

enum class MaterialChannel { basecolor = 0, roughness = 1, metallic = 2 };

inline constexpr std::array<MaterialChannel, 3> kMaterialChannels = {MaterialChannel::basecolor, MaterialChannel::roughness,
                                                                     MaterialChannel::metallic};

inline int channel_width(MaterialChannel c) { return c == MaterialChannel::basecolor ? 3 : 1; }
inline int channel_offset(MaterialChannel c) { return c == MaterialChannel::basecolor ? 0 : (c == MaterialChannel::roughness ? 3 : 4); }
inline const char *channel_name(MaterialChannel c) {
    switch (c) {
    case MaterialChannel::basecolor: return "basecolor";
    case MaterialChannel::roughness: return "roughness";
    case MaterialChannel::metallic: return "metallic";
    }
    return "?";
}

/// softmax: convex combination of the views. direct: the same per-view weights
/// without normalization, w_v = 1/n_seen + z_v, merged value clamped to [0,1]
/// (the no-softmax ablation).
enum class MergeHead { softmax = 0, direct = 1 };

/// (sin(2^k π p_i), cos(2^k π p_i)) for k = 0..levels-1, i = 0..2, k-major.
inline std::vector<double> positional_encode(const Vec3 &p, int levels) {
    if (levels < 1) throw InvalidParameter("positional_encode: levels must be >= 1");
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(6 * levels));
    for (int k = 0; k < levels; ++k) {
        const double f = std::ldexp(kPi, k);
        for (int i = 0; i < 3; ++i) {
            out.push_back(std::sin(f * p[i]));
            out.push_back(std::cos(f * p[i]));
        }
    }
    return out;
}

/// Fully connected ReLU network with all parameters in one contiguous buffer:
/// layer l stores W_l (out×in, column-major) followed by b_l.
template <class Scalar>
class Mlp {
public:
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    using MatrixMap = Eigen::Map<Matrix>;
    using ConstMatrixMap = Eigen::Map<const Matrix>;
    using ConstVectorMap = Eigen::Map<const Vector>;

    struct Cache {
        std::vector<Matrix> activations; // activations[0] = input
        std::vector<Matrix> pre;         // pre-activation of each layer
    };

    Mlp() = default;
    explicit Mlp(std::vector<int> sizes) : sizes_(std::move(sizes)) {
        if (sizes_.size() < 2) throw InvalidParameter("Mlp: at least input and output sizes required");
        std::size_t total = 0;
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
            offsets_.push_back(total);
            total += static_cast<std::size_t>(sizes_[l + 1]) * (sizes_[l] + 1);
        }
        params_.assign(total, Scalar(0));
    }

    const std::vector<int> &sizes() const { return sizes_; }
    int layers() const { return static_cast<int>(sizes_.size()) - 1; }
    int input_dim() const { return sizes_.front(); }
    int output_dim() const { return sizes_.back(); }
    std::span<Scalar> parameters() { return params_; }
    std::span<const Scalar> parameters() const { return params_; }
    std::size_t parameter_count() const { return params_.size(); }

    MatrixMap weight(int l) { return MatrixMap(params_.data() + offsets_[l], sizes_[l + 1], sizes_[l]); }
    ConstMatrixMap weight(int l) const { return ConstMatrixMap(params_.data() + offsets_[l], sizes_[l + 1], sizes_[l]); }
    Eigen::Map<Vector> bias(int l) {
        return Eigen::Map<Vector>(params_.data() + offsets_[l] + static_cast<std::size_t>(sizes_[l + 1]) * sizes_[l], sizes_[l + 1]);
    }
    ConstVectorMap bias(int l) const {
        return ConstVectorMap(params_.data() + offsets_[l] + static_cast<std::size_t>(sizes_[l + 1]) * sizes_[l], sizes_[l + 1]);
    }

    Matrix forward(const Matrix &x, Cache &cache) const {
        cache.activations.assign(1, x);
        cache.pre.clear();
        for (int l = 0; l < layers(); ++l) {
            Matrix z(sizes_[l + 1], x.cols());
            z.noalias() = weight(l) * cache.activations.back();
            z.colwise() += bias(l);
            cache.pre.push_back(z);
            if (l + 1 < layers()) cache.activations.push_back(z.cwiseMax(Scalar(0)));
        }
        return cache.pre.back();
    }

    /// Accumulates parameter gradients into `grad` (same layout as parameters()).
    void backward(const Cache &cache, const Matrix &grad_out, std::span<Scalar> grad) const {
        Matrix delta = grad_out;
        for (int l = layers() - 1; l >= 0; --l) {
            MatrixMap gw(grad.data() + offsets_[l], sizes_[l + 1], sizes_[l]);
            Eigen::Map<Vector> gb(grad.data() + offsets_[l] + static_cast<std::size_t>(sizes_[l + 1]) * sizes_[l], sizes_[l + 1]);
            // Products go through owned (aligned) temporaries so the rounding does not depend on where
            // `grad` happens to sit in memory; the final adds are elementwise and exact either way.
            Matrix pw(sizes_[l + 1], sizes_[l]);
            pw.noalias() = delta * cache.activations[l].transpose();
            const Vector pb = delta.rowwise().sum();
            gw += pw;
            gb += pb;
            if (l > 0) {
                Matrix back(sizes_[l], delta.cols());
                back.noalias() = weight(l).transpose() * delta;
                delta = back.cwiseProduct((cache.pre[l - 1].array() > Scalar(0)).template cast<Scalar>().matrix());
            }
        }
    }

private:
    std::vector<int> sizes_;
    std::vector<std::size_t> offsets_;
    std::vector<Scalar> params_;
};

struct MergerShape {
    int views = 1;
    MaterialChannel channel = MaterialChannel::basecolor;
    int pe_levels = 6;
    int hidden = 128;
    int hidden_layers = 3;
    MergeHead head = MergeHead::softmax;

    int width() const { return channel_width(channel); }
    int input_dim() const { return 6 * pe_levels + 3 + views * width() + views; }
    int output_dim() const { return views; }
    friend bool operator==(const MergerShape &, const MergerShape &) = default;
};

/// Per-Gaussian merger input: seen-mask plus per-view values with unseen slots
/// replaced by the across-view median of the seen ones.
struct MergerInput {
    Vec3 position;                // normalized to [-1,1]^3
    std::vector<double> values;   // V·C, view-major
    std::vector<double> seen;     // V, 0/1
};

inline MergerInput make_merger_input(const Vec3 &normalized_position, std::span<const ViewMaterial> per_view,
                                     MaterialChannel channel) {
    const int c_width = channel_width(channel), c_off = channel_offset(channel);
    const std::size_t views = per_view.size();
    MergerInput in{normalized_position, std::vector<double>(views * c_width, 0.0), std::vector<double>(views, 0.0)};
    std::vector<double> fill(static_cast<std::size_t>(c_width), 0.0);
    bool any = false;
    for (int c = 0; c < c_width; ++c) {
        std::vector<double> seen_values;
        for (const auto &slot : per_view)
            if (slot.seen) seen_values.push_back(slot.value.to_array()[c_off + c]);
        if (seen_values.empty()) continue;
        any = true;
        std::sort(seen_values.begin(), seen_values.end());
        const std::size_t n = seen_values.size();
        fill[c] = n % 2 ? seen_values[n / 2] : 0.5 * (seen_values[n / 2 - 1] + seen_values[n / 2]);
    }
    if (!any) throw ValidationError("merger input: Gaussian has no seen views (it should have been culled)");
    for (std::size_t v = 0; v < views; ++v) {
        in.seen[v] = per_view[v].seen ? 1.0 : 0.0;
        const auto arr = per_view[v].value.to_array();
        for (int c = 0; c < c_width; ++c) in.values[v * c_width + c] = per_view[v].seen ? arr[c_off + c] : fill[c];
    }
    return in;
}

template <class Scalar>
class ChannelMerger {
public:
    using Net = Mlp<Scalar>;
    using Matrix = typename Net::Matrix;

    /// Columns are Gaussians. `values` is (V·C)×B, `seen` is V×B.
    struct Batch {
        Matrix input;
        Matrix values;
        Matrix seen;
        typename Net::Cache cache;
        Matrix logits;  // V×B network outputs
        Matrix weights; // V×B; unnormalized for the direct head
        Matrix raw;     // direct head: C×B before clamping
        Matrix merged;  // C×B
    };

    ChannelMerger() = default;
    explicit ChannelMerger(const MergerShape &shape) : shape_(shape), net_(layer_sizes(shape)) {
        if (shape.views < 1) throw InvalidParameter("merger: at least one view required");
    }

    /// He-initialized hidden layers, zero output layer. Deterministic in `seed`.
    static ChannelMerger init(std::uint64_t seed, const MergerShape &shape) {
        ChannelMerger m(shape);
        std::mt19937_64 rng(mix_seed(seed, 0x6d657267ULL + static_cast<std::uint64_t>(shape.channel)));
        for (int l = 0; l + 1 < m.net_.layers(); ++l) {
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / m.net_.sizes()[l]));
            auto w = m.net_.weight(l);
            for (Eigen::Index j = 0; j < w.cols(); ++j)
                for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<Scalar>(dist(rng));
        }
        return m;
    }

    const MergerShape &shape() const { return shape_; }
    Net &net() { return net_; }
    const Net &net() const { return net_; }
    std::span<Scalar> parameters() { return net_.parameters(); }
    std::span<const Scalar> parameters() const { return net_.parameters(); }

    /// Fills one input column from a prepared MergerInput.
    void encode_input(const MergerInput &in, Eigen::Ref<Matrix> column) const {
        const auto pe = positional_encode(in.position, shape_.pe_levels);
        Eigen::Index r = 0;
        for (double v : pe) column(r++, 0) = static_cast<Scalar>(v);
        for (int i = 0; i < 3; ++i) column(r++, 0) = static_cast<Scalar>(in.position[i]);
        for (double v : in.values) column(r++, 0) = static_cast<Scalar>(v);
        for (double v : in.seen) column(r++, 0) = static_cast<Scalar>(v);
    }

    /// Allocates a batch and encodes the given inputs.
    Batch make_batch(std::span<const MergerInput> inputs) const {
        const auto b = static_cast<Eigen::Index>(inputs.size());
        const int c_width = shape_.width();
        Batch batch;
        batch.input.resize(shape_.input_dim(), b);
        batch.values.resize(static_cast<Eigen::Index>(shape_.views) * c_width, b);
        batch.seen.resize(shape_.views, b);
        for (Eigen::Index j = 0; j < b; ++j) {
            const auto &in = inputs[static_cast<std::size_t>(j)];
            if (in.values.size() != static_cast<std::size_t>(shape_.views * c_width) ||
                in.seen.size() != static_cast<std::size_t>(shape_.views))
                throw InvalidParameter("merger: input does not match the merger's view count");
            encode_input(in, batch.input.col(j));
            for (std::size_t k = 0; k < in.values.size(); ++k) batch.values(static_cast<Eigen::Index>(k), j) = static_cast<Scalar>(in.values[k]);
            for (std::size_t v = 0; v < in.seen.size(); ++v) batch.seen(static_cast<Eigen::Index>(v), j) = static_cast<Scalar>(in.seen[v]);
        }
        return batch;
    }

    void forward(Batch &batch) const {
        const Matrix out = net_.forward(batch.input, batch.cache);
        const Eigen::Index b = out.cols();
        const int views = shape_.views, c_width = shape_.width();
        batch.merged.setZero(c_width, b);
        if (shape_.head == MergeHead::softmax) {
            batch.logits = out;
            batch.weights.setZero(views, b);
            for (Eigen::Index j = 0; j < b; ++j) {
                Scalar top = -std::numeric_limits<Scalar>::infinity();
                for (int v = 0; v < views; ++v)
                    if (batch.seen(v, j) > Scalar(0.5)) top = std::max(top, out(v, j));
                if (!std::isfinite(static_cast<double>(top))) throw ValidationError("merger: Gaussian with no seen views");
                Scalar sum(0);
                for (int v = 0; v < views; ++v) {
                    const Scalar e = batch.seen(v, j) > Scalar(0.5) ? std::exp(out(v, j) - top) : Scalar(0);
                    batch.weights(v, j) = e;
                    sum += e;
                }
                batch.weights.col(j) /= sum;
                for (int v = 0; v < views; ++v)
                    for (int c = 0; c < c_width; ++c)
                        batch.merged(c, j) += batch.weights(v, j) * batch.values(v * c_width + c, j);
            }
        } else {
            batch.logits = out;
            batch.weights.setZero(views, b);
            batch.raw.setZero(c_width, b);
            for (Eigen::Index j = 0; j < b; ++j) {
                Scalar count(0);
                for (int v = 0; v < views; ++v) count += batch.seen(v, j) > Scalar(0.5) ? Scalar(1) : Scalar(0);
                if (count == Scalar(0)) throw ValidationError("merger: Gaussian with no seen views");
                for (int v = 0; v < views; ++v) {
                    if (!(batch.seen(v, j) > Scalar(0.5))) continue;
                    batch.weights(v, j) = Scalar(1) / count + out(v, j);
                    for (int c = 0; c < c_width; ++c) batch.raw(c, j) += batch.weights(v, j) * batch.values(v * c_width + c, j);
                }
            }
            batch.merged = batch.raw.cwiseMax(Scalar(0)).cwiseMin(Scalar(1));
        }
    }

    /// Accumulates ∂loss/∂params into `grad` given ∂loss/∂merged (C×B).
    void backward(const Batch &batch, const Matrix &grad_merged, std::span<Scalar> grad) const {
        const Eigen::Index b = grad_merged.cols();
        const int views = shape_.views, c_width = shape_.width();
        Matrix grad_out;
        if (shape_.head == MergeHead::softmax) {
            grad_out.setZero(views, b);
            for (Eigen::Index j = 0; j < b; ++j) {
                // ∂L/∂w_v = Σ_c g_c x_{v,c};  ∂L/∂h = w ∘ (∂L/∂w - <w, ∂L/∂w>)
                Scalar mean(0);
                for (int v = 0; v < views; ++v) {
                    Scalar gw(0);
                    for (int c = 0; c < c_width; ++c) gw += grad_merged(c, j) * batch.values(v * c_width + c, j);
                    grad_out(v, j) = gw;
                    mean += batch.weights(v, j) * gw;
                }
                for (int v = 0; v < views; ++v) grad_out(v, j) = batch.weights(v, j) * (grad_out(v, j) - mean);
            }
        } else {
            grad_out.setZero(views, b);
            for (Eigen::Index j = 0; j < b; ++j)
                for (int v = 0; v < views; ++v) {
                    if (!(batch.seen(v, j) > Scalar(0.5))) continue;
                    Scalar gw(0);
                    for (int c = 0; c < c_width; ++c) {
                        const Scalar r = batch.raw(c, j);
                        if (r >= Scalar(0) && r <= Scalar(1)) gw += grad_merged(c, j) * batch.values(v * c_width + c, j);
                    }
                    grad_out(v, j) = gw;
                }
        }
        net_.backward(batch.cache, grad_out, grad);
    }

    void write(std::ostream &out) const;
    static ChannelMerger read(std::istream &in);

private:
    static std::vector<int> layer_sizes(const MergerShape &s) {
        std::vector<int> sizes{s.input_dim()};
        for (int i = 0; i < s.hidden_layers; ++i) sizes.push_back(s.hidden);
        sizes.push_back(s.output_dim());
        return sizes;
    }

    MergerShape shape_;
    Net net_;
};

/// Single-Gaussian result: view weights (softmax head) and merged channel values.
struct MergerOutput {
    std::vector<double> weights;
    std::vector<double> merged;
};

template <class Scalar>
MergerOutput merger_forward(const ChannelMerger<Scalar> &merger, const MergerInput &input) {
    auto batch = merger.make_batch(std::span<const MergerInput>(&input, 1));
    merger.forward(batch);
    MergerOutput out;
    for (Eigen::Index v = 0; v < batch.weights.rows(); ++v) out.weights.push_back(static_cast<double>(batch.weights(v, 0)));
    for (Eigen::Index c = 0; c < batch.merged.rows(); ++c) out.merged.push_back(static_cast<double>(batch.merged(c, 0)));
    return out;
}

/// Parameter gradient for a single Gaussian given ∂loss/∂merged.
template <class Scalar>
std::vector<Scalar> merger_backward(const ChannelMerger<Scalar> &merger, const MergerInput &input,
                                    std::span<const double> grad_merged) {
    auto batch = merger.make_batch(std::span<const MergerInput>(&input, 1));
    merger.forward(batch);
    typename ChannelMerger<Scalar>::Matrix g(static_cast<Eigen::Index>(grad_merged.size()), 1);
    for (std::size_t c = 0; c < grad_merged.size(); ++c) g(static_cast<Eigen::Index>(c), 0) = static_cast<Scalar>(grad_merged[c]);
    std::vector<Scalar> grad(merger.parameters().size(), Scalar(0));
    merger.backward(batch, g, grad);
    return grad;
}

/// The three per-channel mergers of a scene.
template <class Scalar>
struct MergerParams {
    std::array<ChannelMerger<Scalar>, 3> channels;

    ChannelMerger<Scalar> &operator[](MaterialChannel c) { return channels[static_cast<int>(c)]; }
    const ChannelMerger<Scalar> &operator[](MaterialChannel c) const { return channels[static_cast<int>(c)]; }
};

template <class Scalar>
ChannelMerger<Scalar> init_params(std::uint64_t seed, int views, MaterialChannel channel, int pe_levels = 6,
                                  MergeHead head = MergeHead::softmax) {
    if (views < 1) throw InvalidParameter("init_params: V must be >= 1");
    MergerShape shape;
    shape.views = views;
    shape.channel = channel;
    shape.pe_levels = pe_levels;
    shape.head = head;
    return ChannelMerger<Scalar>::init(seed, shape);
}

template <class Scalar>
MergerParams<Scalar> init_merger_params(std::uint64_t seed, int views, int pe_levels = 6, MergeHead head = MergeHead::softmax) {
    MergerParams<Scalar> p;
    for (auto c : kMaterialChannels) p[c] = init_params<Scalar>(seed, views, c, pe_levels, head);
    return p;
}

// ---------------------------------------------------------------------------
// Checkpoint blob: "MLMG", u32 version, u32 scalar bytes, shape fields (i32 ×6),
// u32 layer count + i32 sizes, u64 parameter count, raw parameters.

inline constexpr std::uint32_t kMergerBlobVersion = 1;

namespace detail {
template <class T>
void write_pod(std::ostream &out, const T &v) {
    out.write(reinterpret_cast<const char *>(&v), sizeof(T));
}
template <class T>
T read_pod(std::istream &in, const char *what) {
    T v;
    const auto at = in.tellg();
    in.read(reinterpret_cast<char *>(&v), sizeof(T));
    if (!in) throw ParseError(std::string("merger checkpoint: truncated while reading ") + what,
                              at < 0 ? 0 : static_cast<std::uint64_t>(at));
    return v;
}
} // namespace detail

template <class Scalar>
void ChannelMerger<Scalar>::write(std::ostream &out) const {
    out.write("MLMG", 4);
    detail::write_pod(out, kMergerBlobVersion);
    detail::write_pod(out, static_cast<std::uint32_t>(sizeof(Scalar)));
    for (int v : {shape_.views, static_cast<int>(shape_.channel), shape_.pe_levels, shape_.hidden, shape_.hidden_layers,
                  static_cast<int>(shape_.head)})
        detail::write_pod(out, static_cast<std::int32_t>(v));
    detail::write_pod(out, static_cast<std::uint32_t>(net_.sizes().size()));
    for (int s : net_.sizes()) detail::write_pod(out, static_cast<std::int32_t>(s));
    detail::write_pod(out, static_cast<std::uint64_t>(net_.parameter_count()));
    out.write(reinterpret_cast<const char *>(net_.parameters().data()),
              static_cast<std::streamsize>(net_.parameter_count() * sizeof(Scalar)));
}

template <class Scalar>
ChannelMerger<Scalar> ChannelMerger<Scalar>::read(std::istream &in) {
    char magic[4];
    const auto start = in.tellg();
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MLMG", 4) != 0)
        throw ParseError("merger checkpoint: bad magic", start < 0 ? 0 : static_cast<std::uint64_t>(start));
    const auto version = detail::read_pod<std::uint32_t>(in, "version");
    if (version != kMergerBlobVersion) throw VersionMismatch("merger checkpoint: unsupported version " + std::to_string(version));
    const auto scalar = detail::read_pod<std::uint32_t>(in, "scalar size");
    if (scalar != sizeof(Scalar)) throw ValidationError("merger checkpoint: scalar type mismatch");
    MergerShape shape;
    shape.views = detail::read_pod<std::int32_t>(in, "views");
    shape.channel = static_cast<MaterialChannel>(detail::read_pod<std::int32_t>(in, "channel"));
    shape.pe_levels = detail::read_pod<std::int32_t>(in, "pe levels");
    shape.hidden = detail::read_pod<std::int32_t>(in, "hidden");
    shape.hidden_layers = detail::read_pod<std::int32_t>(in, "hidden layers");
    shape.head = static_cast<MergeHead>(detail::read_pod<std::int32_t>(in, "head"));
    ChannelMerger m(shape);
    const auto layers = detail::read_pod<std::uint32_t>(in, "layer count");
    if (layers != m.net_.sizes().size()) throw ValidationError("merger checkpoint: layer count mismatch");
    for (int expected : m.net_.sizes())
        if (detail::read_pod<std::int32_t>(in, "layer size") != expected) throw ValidationError("merger checkpoint: layer shape mismatch");
    const auto count = detail::read_pod<std::uint64_t>(in, "parameter count");
    if (count != m.net_.parameter_count()) throw ValidationError("merger checkpoint: parameter count mismatch");
    const auto at = in.tellg();
    in.read(reinterpret_cast<char *>(m.net_.parameters().data()), static_cast<std::streamsize>(count * sizeof(Scalar)));
    if (!in) throw ParseError("merger checkpoint: truncated parameters", at < 0 ? 0 : static_cast<std::uint64_t>(at));
    return m;
}

} // namespace matlift
