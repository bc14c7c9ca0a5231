#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "stoplab/errors.hpp"
#include "stoplab/rng.hpp"

namespace stoplab {

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0) {
            throw dim_error("negative dimension " + std::to_string(d));
        }
        n *= d; // zero dims are legal: empty batches are valid data
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Dense row-major tensor. `grad` stays empty until something accumulates into
// it; when present it has exactly the shape of `value`.
template <class Real>
struct Tensor {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;
    bool requires_grad = false;

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    bool is_scalar() const { return value.size() == 1; }

    void ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), Real(0));
        }
    }
    void zero_grad() {
        for (auto& g : grad) g = Real(0);
    }
    bool has_grad() const { return grad.size() == value.size() && !value.empty(); }
};

template <class Real>
using TensorPtr = std::shared_ptr<Tensor<Real>>;

template <class Real>
TensorPtr<Real> make_tensor(Shape shape, bool requires_grad = false) {
    auto t = std::make_shared<Tensor<Real>>();
    t->shape = std::move(shape);
    t->value.assign(static_cast<std::size_t>(numel_of(t->shape)), Real(0));
    t->requires_grad = requires_grad;
    return t;
}

template <class Real>
TensorPtr<Real> make_tensor(Shape shape, std::vector<Real> value, bool requires_grad = false) {
    auto t = std::make_shared<Tensor<Real>>();
    t->shape = std::move(shape);
    if (static_cast<std::int64_t>(value.size()) != numel_of(t->shape)) {
        throw dim_error("value size " + std::to_string(value.size()) + " does not match shape " +
                        shape_str(t->shape));
    }
    t->value = std::move(value);
    t->requires_grad = requires_grad;
    return t;
}

template <class Real>
TensorPtr<Real> full_tensor(Shape shape, Real fill, bool requires_grad = false) {
    auto t = make_tensor<Real>(std::move(shape), requires_grad);
    for (auto& v : t->value) v = fill;
    return t;
}

// Centered-uniform fan-in init, the standard linear-layer scheme.
template <class Real>
TensorPtr<Real> uniform_fan_in(Shape shape, int fan_in, Rng& rng, bool requires_grad = true) {
    auto t = make_tensor<Real>(std::move(shape), requires_grad);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t->value) v = static_cast<Real>(rng.uniform(-bound, bound));
    return t;
}

template <class Real>
TensorPtr<Real> gauss_tensor(Shape shape, double std_dev, Rng& rng, bool requires_grad = false) {
    auto t = make_tensor<Real>(std::move(shape), requires_grad);
    for (auto& v : t->value) v = static_cast<Real>(std_dev * rng.gauss());
    return t;
}

// Reverse-mode tape. Operations record themselves in construction order,
// which for an eagerly built graph is a topological order; backward() walks
// the tape once in reverse. A graph is single-shot: after backward() it must
// be reset() before recording again.
template <class Real>
class Graph {
  public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    // Registers the backward closure of a freshly computed op output. The
    // closure must accumulate (+=) into input grads; accumulation is what
    // makes shared parameters (weight tying) receive every contribution.
    // A no-op when grads are disabled or no input is tracked.
    void record(const TensorPtr<Real>& out, const std::vector<TensorPtr<Real>>& inputs,
                std::function<void()> vjp) {
        if (!grad_enabled_) {
            return;
        }
        bool needs = false;
        for (const auto& in : inputs) {
            if (in->requires_grad) {
                needs = true;
                break;
            }
        }
        if (needs) {
            out->requires_grad = true;
            out->ensure_grad();
            tape_.push_back(Step{out, std::move(vjp)});
        }
    }

    // Seeds d(loss)/d(loss) = 1 and runs every recorded op's vjp in reverse
    // topological order. Leaf grads are accumulated, never cleared here; the
    // caller owns zeroing between iterations.
    void backward(const TensorPtr<Real>& loss) {
        if (spent_) {
            throw usage_error("backward called twice on the same graph; reset() and re-run forward");
        }
        if (!loss->is_scalar()) {
            throw usage_error("backward requires a scalar loss, got shape " + shape_str(loss->shape));
        }
        spent_ = true;
        if (!loss->requires_grad) {
            return; // loss does not depend on any tracked tensor
        }
        loss->ensure_grad();
        loss->grad[0] += Real(1);
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
            it->vjp();
        }
    }

    void reset() {
        tape_.clear();
        spent_ = false;
    }

    std::size_t size() const { return tape_.size(); }

  private:
    struct Step {
        TensorPtr<Real> out;
        std::function<void()> vjp;
    };

    std::vector<Step> tape_;
    bool grad_enabled_ = true;
    bool spent_ = false;
};

} // namespace stoplab
