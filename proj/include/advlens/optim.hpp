#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "advlens/models.hpp"

namespace advlens::optim {

/// True for parameters that take weight decay: everything except norm
/// gains/offsets and the CLS/positional embeddings.
bool decays(const std::string& name);

/// SGD with momentum: g += wd·p (decaying params only); buf = m·buf + g;
/// p -= lr·buf. Parameters without a gradient are skipped.
class Sgd {
public:
    Sgd(double momentum, double weight_decay, std::function<bool(const std::string&)> decay_filter = decays);
    void step(models::ParameterSet& params, double lr);

private:
    double momentum_;
    double weight_decay_;
    std::function<bool(const std::string&)> decay_filter_;
    std::map<std::string, std::vector<double>> buffers_;
};

class Adam {
public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step(models::ParameterSet& params);

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace advlens::optim
