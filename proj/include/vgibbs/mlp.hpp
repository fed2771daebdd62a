#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "vgibbs/core.hpp"
#include "vgibbs/rng.hpp"

namespace vgibbs {

struct Layer {
    Mat weight;  // out x in
    Vec bias;    // out
};

/// Gradients with the same layout as an Mlp's layers.
struct MlpGrads {
    std::vector<Mat> weight;
    std::vector<Vec> bias;
};

/// Per-layer values recorded by forward() and consumed by backward().
/// Columns are batch samples.
struct MlpCache {
    std::vector<Mat> inputs;  // input to layer l
    std::vector<Mat> pre;     // pre-activation of layer l
};

/**
 * Fully connected network with leaky-ReLU hidden activations and a linear
 * output layer. Batched passes take one sample per column.
 */
class Mlp {
  public:
    static constexpr double kNegativeSlope = 0.01;

    Mlp() = default;
    explicit Mlp(std::vector<Layer> layers) : layers_(std::move(layers)) {
        require(!layers_.empty(), "Mlp: at least one layer required");
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            require(layers_[l].bias.size() == layers_[l].weight.rows(), "Mlp: bias/weight mismatch");
            if (l > 0) require(layers_[l].weight.cols() == layers_[l - 1].weight.rows(), "Mlp: layer dimensions do not chain");
        }
    }

    /// Kaiming-normal weights (fan-in, gain for the 0.01-slope leaky rectifier), zero biases.
    static Mlp kaiming(std::span<const int> shape, Rng& rng) {
        require(shape.size() >= 2, "mlp_init: shape needs at least two entries");
        for (int s : shape) require(s > 0, "mlp_init: layer sizes must be positive");
        const double gain = std::sqrt(2.0 / (1.0 + kNegativeSlope * kNegativeSlope));
        std::vector<Layer> layers;
        for (std::size_t l = 0; l + 1 < shape.size(); ++l) {
            const int fan_in = shape[l];
            const double stddev = gain / std::sqrt(static_cast<double>(fan_in));
            Layer layer{Mat(shape[l + 1], fan_in), Vec::Zero(shape[l + 1])};
            for (Index c = 0; c < layer.weight.cols(); ++c)
                for (Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = stddev * rng.normal();
            layers.push_back(std::move(layer));
        }
        return Mlp(std::move(layers));
    }

    static Mlp kaiming(std::initializer_list<int> shape, Rng& rng) {
        std::vector<int> s(shape);
        return kaiming(std::span<const int>(s), rng);
    }

    const std::vector<Layer>& layers() const noexcept { return layers_; }
    std::vector<Layer>& layers() noexcept { return layers_; }
    Index input_size() const { return layers_.front().weight.cols(); }
    Index output_size() const { return layers_.back().weight.rows(); }

    Index num_params() const {
        Index n = 0;
        for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
        return n;
    }

    MlpGrads zero_grads() const {
        MlpGrads g;
        for (const auto& l : layers_) {
            g.weight.push_back(Mat::Zero(l.weight.rows(), l.weight.cols()));
            g.bias.push_back(Vec::Zero(l.bias.size()));
        }
        return g;
    }

    Mat forward(const Mat& x, MlpCache* cache = nullptr) const {
        if (x.rows() != input_size()) throw InvalidArgument("mlp_forward: input dimension mismatch");
        if (cache) {
            cache->inputs.resize(layers_.size());
            cache->pre.resize(layers_.size());
        }
        Mat h = x;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            Mat z = layers_[l].weight * h;
            z.colwise() += layers_[l].bias;
            if (cache) {
                cache->inputs[l] = std::move(h);
                cache->pre[l] = z;
            }
            if (l + 1 < layers_.size()) z = z.unaryExpr([](double v) { return v > 0.0 ? v : kNegativeSlope * v; });
            h = std::move(z);
        }
        return h;
    }

    Vec forward(const Vec& x, MlpCache* cache = nullptr) const { return forward(Mat(x), cache).col(0); }

    /// Accumulates (+=) the gradient of sum(output .* upstream) into `grads`
    /// and returns the gradient with respect to the input batch.
    Mat backward(const MlpCache& cache, const Mat& upstream, MlpGrads& grads) const {
        if (cache.pre.size() != layers_.size()) throw InvalidArgument("mlp_backward: cache does not match network");
        if (upstream.rows() != output_size() || upstream.cols() != cache.pre.back().cols())
            throw InvalidArgument("mlp_backward: upstream gradient shape mismatch");
        if (grads.weight.size() != layers_.size()) throw InvalidArgument("mlp_backward: gradient buffer mismatch");
        Mat delta = upstream;
        for (std::size_t l = layers_.size(); l-- > 0;) {
            if (l + 1 < layers_.size()) {
                delta.array() *= cache.pre[l].array().unaryExpr([](double v) { return v > 0.0 ? 1.0 : kNegativeSlope; });
            }
            grads.weight[l].noalias() += delta * cache.inputs[l].transpose();
            grads.bias[l].noalias() += delta.rowwise().sum();
            delta = layers_[l].weight.transpose() * delta;
        }
        return delta;
    }

    void pack(double* out) const {
        for (const auto& l : layers_) {
            Eigen::Map<Mat>(out, l.weight.rows(), l.weight.cols()) = l.weight;
            out += l.weight.size();
            Eigen::Map<Vec>(out, l.bias.size()) = l.bias;
            out += l.bias.size();
        }
    }

    void unpack(const double* in) {
        for (auto& l : layers_) {
            l.weight = Eigen::Map<const Mat>(in, l.weight.rows(), l.weight.cols());
            in += l.weight.size();
            l.bias = Eigen::Map<const Vec>(in, l.bias.size());
            in += l.bias.size();
        }
    }

    static void pack(const MlpGrads& g, double* out) {
        for (std::size_t l = 0; l < g.weight.size(); ++l) {
            Eigen::Map<Mat>(out, g.weight[l].rows(), g.weight[l].cols()) = g.weight[l];
            out += g.weight[l].size();
            Eigen::Map<Vec>(out, g.bias[l].size()) = g.bias[l];
            out += g.bias[l].size();
        }
    }

  private:
    std::vector<Layer> layers_;
};

inline Mlp mlp_init(std::span<const int> shape, Rng& rng) { return Mlp::kaiming(shape, rng); }

}  // namespace vgibbs
