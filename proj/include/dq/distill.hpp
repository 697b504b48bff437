#pragma once

#include <map>
#include <string>
#include <vector>

#include "dq/model.hpp"

namespace dq {

// Layers whose features are distilled: projections adjacent to shortcut
// concatenations and the feed-forward projections, in registry order.
inline std::vector<std::string> select_sensitive_layers(const DenoiserModel& m,
                                                        const std::string& profile = "default") {
    if (profile == "none") return {};
    check(profile == "default",
          "sensitive-layer profile '" + profile + "' is not instantiated for this architecture");
    std::vector<std::string> out;
    for (const auto* p : m.params) {
        if (!p->name.ends_with(".w")) continue;
        if (p->role == Role::shortcut_adjacent || p->role == Role::ffn_projection)
            out.push_back(p->name.substr(0, p->name.size() - 2));
    }
    check(!out.empty(), "sensitive-layer selection came up empty");
    return out;
}

// Mean squared error between student and teacher outputs. Optionally emits
// the gradient with respect to the student side.
inline double loss_output(const Tensor& q, const Tensor& fp, Tensor* grad = nullptr) {
    check(q.same_shape(fp), "loss_output: shape mismatch");
    check(!q.v.empty(), "loss_output: empty tensors");
    double sum = 0;
    if (grad && !grad->same_shape(q)) *grad = Tensor(q.dims);
    double inv = 1.0 / static_cast<double>(q.v.size());
    for (size_t i = 0; i < q.v.size(); ++i) {
        double d = static_cast<double>(q.v[i]) - static_cast<double>(fp.v[i]);
        sum += d * d;
        if (grad) grad->v[i] = static_cast<float>(2.0 * d * inv);
    }
    double l = sum * inv;
    check(std::isfinite(l), "loss_output: non-finite loss");
    return l;
}

// Sum over sensitive layers of the per-layer mean squared feature difference
// (equal layer weights). Gradients accumulate into per-layer tensors keyed
// like the captures, ready to inject at the capture points during backward.
inline double loss_sensitive(const std::map<std::string, Tensor>& cap_q,
                             const std::map<std::string, Tensor>& cap_fp,
                             const std::vector<std::string>& layers,
                             std::map<std::string, Tensor>* grads = nullptr) {
    double total = 0;
    if (grads) grads->clear();
    for (const auto& name : layers) {
        auto iq = cap_q.find(name);
        auto ifp = cap_fp.find(name);
        check(iq != cap_q.end() && ifp != cap_fp.end(), "loss_sensitive: missing capture " + name);
        Tensor* g = nullptr;
        if (grads) g = &(*grads)[name];
        total += loss_output(iq->second, ifp->second, g);
    }
    check(std::isfinite(total), "loss_sensitive: non-finite loss");
    return total;
}

inline double total_loss(double l_out, double l_sen) {
    check(std::isfinite(l_out) && std::isfinite(l_sen), "total_loss: non-finite term");
    return l_out + l_sen;
}

}  // namespace dq
