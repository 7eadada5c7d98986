// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale laboratory: a tanh MLP classifier with exact analytic
// gradients, a central-difference oracle, full-batch training, and an
// Evaluator adapter. Parameters live in a TensorMap under the names
// "layer{k}.weight" (shape [out, in], row-major) and "layer{k}.bias"
// (shape [out]), 1-based, so partition schemas apply directly. All math is
// 64-bit; 32-bit conversion happens only at checkpoint export.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "apl/batch.hpp"
#include "apl/errors.hpp"
#include "apl/importance.hpp"
#include "apl/partition.hpp"
#include "apl/rng.hpp"
#include "apl/tensor_map.hpp"

namespace apl::toy {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct ToyNetSpec {
    std::size_t input_dim = 8;
    std::vector<std::size_t> hidden_dims = {32, 32};
    std::size_t class_count = 4;
    std::uint64_t seed = 0;

    void validate() const {
        if (input_dim == 0 || class_count == 0) {
            throw ConfigError("net dimensions must be at least 1");
        }
        for (std::size_t d : hidden_dims) {
            if (d == 0) throw ConfigError("net dimensions must be at least 1");
        }
    }

    std::size_t layer_count() const { return hidden_dims.size() + 1; }

    /// Output width of layer k (1-based).
    std::size_t out_dim(std::size_t k) const {
        return k <= hidden_dims.size() ? hidden_dims[k - 1] : class_count;
    }

    /// Input width of layer k (1-based).
    std::size_t in_dim(std::size_t k) const {
        return k == 1 ? input_dim : hidden_dims[k - 2];
    }
};

inline std::string weight_name(std::size_t k) { return "layer" + std::to_string(k) + ".weight"; }
inline std::string bias_name(std::size_t k) { return "layer" + std::to_string(k) + ".bias"; }

/// Uniform +-1/sqrt(fan_in) init, one deterministic stream per tensor.
inline TensorMap init_toy_net(const ToyNetSpec& spec) {
    spec.validate();
    TensorMap net;
    for (std::size_t k = 1; k <= spec.layer_count(); ++k) {
        const std::size_t out = spec.out_dim(k);
        const std::size_t in = spec.in_dim(k);
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        SequentialRng wrng(spec.seed, weight_name(k));
        std::vector<double> w(out * in);
        for (auto& v : w) v = (wrng.next_uniform() * 2.0 - 1.0) * bound;
        net.set(weight_name(k), DenseTensor({out, in}, std::move(w)));
        SequentialRng brng(spec.seed, bias_name(k));
        std::vector<double> b(out);
        for (auto& v : b) v = (brng.next_uniform() * 2.0 - 1.0) * bound;
        net.set(bias_name(k), DenseTensor({out}, std::move(b)));
    }
    return net;
}

/// Recovers the architecture from tensor names and shapes. Layer indices are
/// compared numerically, so "layer10" sorts after "layer2".
inline ToyNetSpec infer_toy_spec(const TensorMap& net) {
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> layers; // k -> (out, in)
    for (const auto& [name, tensor] : net) {
        if (name.rfind("layer", 0) != 0) {
            throw SchemaError("tensor '" + name + "' does not belong to a toy net");
        }
        const std::size_t dot = name.find('.');
        if (dot == std::string::npos) throw SchemaError("tensor '" + name + "' has no suffix");
        const std::string index_text = name.substr(5, dot - 5);
        const std::string kind = name.substr(dot + 1);
        std::size_t k = 0;
        try {
            std::size_t consumed = 0;
            k = std::stoul(index_text, &consumed);
            if (consumed != index_text.size() || k == 0) throw std::invalid_argument("");
        } catch (const std::exception&) {
            throw SchemaError("tensor '" + name + "' has no valid layer index");
        }
        if (kind == "weight") {
            if (tensor.shape().size() != 2) {
                throw SchemaError("weight '" + name + "' must be rank 2");
            }
            layers[k].first = tensor.shape()[0];
            layers[k].second = tensor.shape()[1];
        } else if (kind != "bias") {
            throw SchemaError("tensor '" + name + "' is neither a weight nor a bias");
        }
    }
    if (layers.empty()) throw SchemaError("net has no layers");

    ToyNetSpec spec;
    std::size_t expected = 1;
    for (const auto& [k, dims] : layers) {
        if (k != expected) {
            throw SchemaError("net layers are not contiguous at layer " + std::to_string(k));
        }
        ++expected;
    }
    spec.input_dim = layers.at(1).second;
    spec.hidden_dims.clear();
    const std::size_t count = layers.size();
    for (std::size_t k = 1; k < count; ++k) spec.hidden_dims.push_back(layers.at(k).first);
    spec.class_count = layers.at(count).first;

    if (net.tensor_count() != 2 * count) {
        throw SchemaError("net has tensors that belong to no complete layer");
    }
    // bias shapes and inter-layer widths must agree
    for (std::size_t k = 1; k <= count; ++k) {
        if (!net.contains(weight_name(k)) || !net.contains(bias_name(k))) {
            throw SchemaError("layer " + std::to_string(k) + " is missing a weight or bias");
        }
        const auto& b = net.at(bias_name(k));
        if (b.shape().size() != 1 || b.shape()[0] != spec.out_dim(k)) {
            throw SchemaError("bias '" + bias_name(k) + "' does not match its weight");
        }
        if (net.at(weight_name(k)).shape()[1] != spec.in_dim(k)) {
            throw SchemaError("weight '" + weight_name(k) + "' input width mismatch");
        }
    }
    return spec;
}

namespace detail {

inline Eigen::Map<const Matrix> weight_view(const TensorMap& net, const ToyNetSpec& spec,
                                            std::size_t k) {
    const DenseTensor& t = net.at(weight_name(k));
    return Eigen::Map<const Matrix>(t.values().data(), static_cast<Eigen::Index>(spec.out_dim(k)),
                                    static_cast<Eigen::Index>(spec.in_dim(k)));
}

inline Eigen::Map<const Vector> bias_view(const TensorMap& net, const ToyNetSpec& spec,
                                          std::size_t k) {
    const DenseTensor& t = net.at(bias_name(k));
    return Eigen::Map<const Vector>(t.values().data(),
                                    static_cast<Eigen::Index>(spec.out_dim(k)));
}

/// Rowwise softmax with the max subtracted.
inline Matrix softmax_rows(Matrix z) {
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double m = z.row(r).maxCoeff();
        z.row(r) = (z.row(r).array() - m).exp();
        z.row(r) /= z.row(r).sum();
    }
    return z;
}

/// Activations per layer; index 0 is the input, the last entry is the
/// probability matrix.
inline std::vector<Matrix> forward_pass(const TensorMap& net, const ToyNetSpec& spec,
                                        const Matrix& inputs) {
    if (static_cast<std::size_t>(inputs.cols()) != spec.input_dim) {
        throw ValidationError("input width " + std::to_string(inputs.cols()) +
                              " does not match net input dim " + std::to_string(spec.input_dim));
    }
    std::vector<Matrix> acts;
    acts.reserve(spec.layer_count() + 1);
    acts.push_back(inputs);
    for (std::size_t k = 1; k <= spec.layer_count(); ++k) {
        Matrix z = acts.back() * weight_view(net, spec, k).transpose();
        z.rowwise() += bias_view(net, spec, k).transpose();
        if (k < spec.layer_count()) {
            acts.push_back(z.array().tanh().matrix());
        } else {
            acts.push_back(softmax_rows(std::move(z)));
        }
    }
    return acts;
}

inline Matrix batch_matrix(const FewShotBatch& batch) {
    batch.validate();
    Matrix x(static_cast<Eigen::Index>(batch.size()),
             static_cast<Eigen::Index>(batch.input_dim()));
    for (std::size_t r = 0; r < batch.size(); ++r) {
        for (std::size_t c = 0; c < batch.input_dim(); ++c) {
            x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = batch.inputs[r][c];
        }
    }
    return x;
}

inline void check_labels(const FewShotBatch& batch, const ToyNetSpec& spec) {
    for (int label : batch.labels) {
        if (label < 0 || static_cast<std::size_t>(label) >= spec.class_count) {
            throw ValidationError("label " + std::to_string(label) + " is outside the " +
                                  std::to_string(spec.class_count) + "-class range");
        }
    }
}

} // namespace detail

/// Class-probability matrix, one softmax row per input.
inline Matrix toy_forward(const TensorMap& net, const ToyNetSpec& spec, const Matrix& inputs) {
    return detail::forward_pass(net, spec, inputs).back();
}

inline Matrix toy_forward(const TensorMap& net, const ToyNetSpec& spec,
                          const FewShotBatch& batch) {
    return toy_forward(net, spec, detail::batch_matrix(batch));
}

/// Mean cross-entropy and its exact analytic gradient, shape-aligned with
/// the net.
inline std::pair<double, TensorMap> toy_loss_and_grad(const TensorMap& net,
                                                      const ToyNetSpec& spec,
                                                      const FewShotBatch& batch) {
    detail::check_labels(batch, spec);
    const Matrix x = detail::batch_matrix(batch);
    const auto acts = detail::forward_pass(net, spec, x);
    const Matrix& probs = acts.back();
    const auto n = static_cast<Eigen::Index>(batch.size());
    const double inv_n = 1.0 / static_cast<double>(batch.size());

    double loss = 0.0;
    Matrix dz = probs; // (P - Y) / n
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto y = static_cast<Eigen::Index>(batch.labels[static_cast<std::size_t>(r)]);
        loss -= std::log(std::max(probs(r, y), 1e-300));
        dz(r, y) -= 1.0;
    }
    loss *= inv_n;
    dz *= inv_n;

    TensorMap grad;
    for (std::size_t k = spec.layer_count(); k >= 1; --k) {
        const Matrix& below = acts[k - 1];
        const Matrix dw = dz.transpose() * below; // [out, in]
        const Vector db = dz.colwise().sum().transpose();
        grad.set(weight_name(k),
                 DenseTensor({spec.out_dim(k), spec.in_dim(k)},
                             std::vector<double>(dw.data(), dw.data() + dw.size())));
        grad.set(bias_name(k), DenseTensor({spec.out_dim(k)},
                                           std::vector<double>(db.data(), db.data() + db.size())));
        if (k > 1) {
            const Matrix da = dz * detail::weight_view(net, spec, k); // [n, in]
            dz = da.cwiseProduct(
                (1.0 - below.array().square()).matrix()); // tanh'(z) = 1 - a^2
        }
    }
    return {loss, std::move(grad)};
}

inline double toy_loss(const TensorMap& net, const ToyNetSpec& spec, const FewShotBatch& batch) {
    detail::check_labels(batch, spec);
    const Matrix probs = toy_forward(net, spec, batch);
    double loss = 0.0;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        loss -= std::log(std::max(
            probs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(batch.labels[r])),
            1e-300));
    }
    return loss / static_cast<double>(batch.size());
}

/// Central differences (L(theta + h e_i) - L(theta - h e_i)) / 2h.
inline TensorMap toy_finite_diff_grad(const TensorMap& net, const ToyNetSpec& spec,
                                      const FewShotBatch& batch, double h) {
    if (!(h > 0.0)) throw ValidationError("finite-difference step must be positive");
    TensorMap grad;
    TensorMap probe = net;
    for (const auto& [name, tensor] : net) {
        std::vector<double> g(tensor.size());
        DenseTensor bumped = tensor;
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            const double original = bumped.values()[i];
            bumped.values()[i] = original + h;
            probe.set(name, bumped);
            const double up = toy_loss(probe, spec, batch);
            bumped.values()[i] = original - h;
            probe.set(name, bumped);
            const double down = toy_loss(probe, spec, batch);
            bumped.values()[i] = original;
            g[i] = (up - down) / (2.0 * h);
        }
        probe.set(name, bumped);
        grad.set(name, DenseTensor(tensor.shape(), std::move(g)));
    }
    return grad;
}

/// Full-batch gradient descent. Tensors matching a freeze pattern keep their
/// initial values exactly. epochs = 0 returns the input unchanged.
inline TensorMap toy_train(const TensorMap& net, const ToyNetSpec& spec,
                           const FewShotBatch& data, std::size_t epochs, double step_size,
                           const std::vector<std::string>& freeze_patterns = {}) {
    detail::check_labels(data, spec);
    TensorMap current = net;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        auto [loss, grad] = toy_loss_and_grad(current, spec, data);
        if (!std::isfinite(loss)) {
            throw StageError("toy-train", ErrorKind::data,
                             "loss became non-finite at epoch " + std::to_string(epoch) +
                                 " (step size " + std::to_string(step_size) + ")");
        }
        for (const auto& [name, g] : grad) {
            bool frozen = false;
            for (const auto& pattern : freeze_patterns) {
                if (glob_match(pattern, name)) {
                    frozen = true;
                    break;
                }
            }
            if (frozen) continue;
            DenseTensor t = current.at(name);
            for (std::size_t i = 0; i < t.size(); ++i) {
                t.values()[i] -= step_size * g.values()[i];
            }
            current.set(name, std::move(t));
        }
    }
    return current;
}

struct EvalResult {
    double accuracy = 0.0;
    double mean_true_probability = 0.0;
};

/// Accuracy by arg-max (lowest index wins ties) and mean true-label
/// probability over the split.
inline EvalResult toy_evaluate(const TensorMap& net, const ToyNetSpec& spec,
                               const FewShotBatch& split) {
    detail::check_labels(split, spec);
    const Matrix probs = toy_forward(net, spec, split);
    std::size_t correct = 0;
    double total_p = 0.0;
    for (std::size_t r = 0; r < split.size(); ++r) {
        const auto row = probs.row(static_cast<Eigen::Index>(r));
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < row.size(); ++c) {
            if (row(c) > row(best)) best = c;
        }
        if (best == static_cast<Eigen::Index>(split.labels[r])) ++correct;
        total_p += row(static_cast<Eigen::Index>(split.labels[r]));
    }
    EvalResult result;
    result.accuracy = static_cast<double>(correct) / static_cast<double>(split.size());
    result.mean_true_probability = total_p / static_cast<double>(split.size());
    return result;
}

/// Evaluator adapter over the toy net. The architecture is inferred from
/// each model map, so substituted and merged variants evaluate directly.
class ToyEvaluator final : public GradientEvaluator {
public:
    explicit ToyEvaluator(std::size_t class_count) : class_count_(class_count) {}

    Score score(const TensorMap& model, const FewShotBatch& batch) const override {
        const ToyNetSpec spec = infer_toy_spec(model);
        if (spec.class_count != class_count_) {
            throw ValidationError("net has " + std::to_string(spec.class_count) +
                                  " classes, evaluator expects " + std::to_string(class_count_));
        }
        const EvalResult r = toy_evaluate(model, spec, batch);
        Score s;
        s.probability = r.mean_true_probability;
        s.loss = toy_loss(model, spec, batch);
        return s;
    }

    std::size_t class_count() const override { return class_count_; }

    TensorMap loss_gradient(const TensorMap& model, const FewShotBatch& batch) const override {
        const ToyNetSpec spec = infer_toy_spec(model);
        return toy_loss_and_grad(model, spec, batch).second;
    }

private:
    std::size_t class_count_;
};

} // namespace apl::toy
