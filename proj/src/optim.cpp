#include "advlens/optim.hpp"

#include <cmath>

namespace advlens::optim {

bool decays(const std::string& name) {
    if (name == "cls_token" || name == "pos_embed") return false;
    // norm1, norm2 and the final norm, matched as a path component.
    const std::string prefixed = "." + name;
    return prefixed.find(".norm") == std::string::npos;
}

Sgd::Sgd(double momentum, double weight_decay, std::function<bool(const std::string&)> decay_filter)
    : momentum_(momentum), weight_decay_(weight_decay), decay_filter_(std::move(decay_filter)) {}

void Sgd::step(models::ParameterSet& params, double lr) {
    for (auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        const auto g = p.grad();
        auto& buf = buffers_[name];
        const bool first = buf.empty();
        if (first) buf.assign(g.size(), 0.0);
        const double wd = decay_filter_(name) ? weight_decay_ : 0.0;
        auto w = p.mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double d = g[i] + wd * w[i];
            buf[i] = first ? d : momentum_ * buf[i] + d;
            w[i] -= lr * buf[i];
        }
    }
}

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(models::ParameterSet& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        const auto g = p.grad();
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.empty()) {
            m.assign(g.size(), 0.0);
            v.assign(g.size(), 0.0);
        }
        auto w = p.mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = beta1_ * m[i] + (1 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1 - beta2_) * g[i] * g[i];
            w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
    }
}

}  // namespace advlens::optim
