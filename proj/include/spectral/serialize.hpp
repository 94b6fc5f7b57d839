#pragma once

#include <json.hpp>

#include "spectral/kron_factor.hpp"

namespace spectral {

// {dim, basis (row-major), eigvals}
template <typename T>
nlohmann::json to_json(const SpectralFactor<T>& f) {
  nlohmann::json j;
  j["dim"] = f.dim();
  std::vector<double> basis;
  basis.reserve(static_cast<std::size_t>(f.dim() * f.dim()));
  for (Index r = 0; r < f.dim(); ++r)
    for (Index c = 0; c < f.dim(); ++c) basis.push_back(static_cast<double>(f.basis()(r, c)));
  j["basis"] = basis;
  std::vector<double> d(f.eigvals().data(), f.eigvals().data() + f.dim());
  j["eigvals"] = d;
  return j;
}

template <typename T>
SpectralFactor<T> spectral_factor_from_json(const nlohmann::json& j) {
  try {
    const Index dim = j.at("dim").get<Index>();
    const auto basis = j.at("basis").get<std::vector<double>>();
    const auto eig = j.at("eigvals").get<std::vector<double>>();
    if (dim < 1 || static_cast<Index>(basis.size()) != dim * dim || static_cast<Index>(eig.size()) != dim)
      throw InvalidArgument("spectral factor json: inconsistent sizes");
    Matrix<T> b(dim, dim);
    Vector<T> d(dim);
    for (Index r = 0; r < dim; ++r)
      for (Index c = 0; c < dim; ++c) b(r, c) = static_cast<T>(basis[static_cast<std::size_t>(r * dim + c)]);
    for (Index i = 0; i < dim; ++i) d(i) = static_cast<T>(eig[static_cast<std::size_t>(i)]);
    return SpectralFactor<T>::unchecked(std::move(b), std::move(d));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("spectral factor json: ") + e.what());
  }
}

// {alpha, factor_C, factor_K}
template <typename T>
nlohmann::json to_json(const KronSpectralFactor<T>& kf) {
  return {{"alpha", static_cast<double>(kf.alpha())}, {"factor_C", to_json(kf.factor_c())},
          {"factor_K", to_json(kf.factor_k())}};
}

template <typename T>
KronSpectralFactor<T> kron_factor_from_json(const nlohmann::json& j) {
  try {
    return KronSpectralFactor<T>(static_cast<T>(j.at("alpha").get<double>()),
                                 spectral_factor_from_json<T>(j.at("factor_C")),
                                 spectral_factor_from_json<T>(j.at("factor_K")));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("kron factor json: ") + e.what());
  }
}

}  // namespace spectral
