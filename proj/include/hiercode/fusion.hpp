#pragma once

#include <vector>

#include "hiercode/feature_file.hpp"
#include "hiercode/struct_embedding.hpp"
#include "hiercode/tensor.hpp"

namespace hiercode {

struct FusedEmbedding {
  Tensor vectors;  // [|E|, d]
  double rho = 0.5;
  std::vector<unsigned char> used_fallback;  // 1 where the structural vector stood in for missing text
};

struct FuseOptions {
  double rho = 0.5;
  bool fallback_to_struct = false;
};

// Row-wise convex combination rho * structural + (1 - rho) * textual.
inline FusedEmbedding fuse(const Tensor& structural, const FeatureTable& text, const FuseOptions& opt = {}) {
  require(opt.rho >= 0.0 && opt.rho <= 1.0, "fuse: rho must lie in [0, 1], got ", opt.rho);
  if (structural.rank() != 2) fail<ShapeError>("fuse: structural table must be a matrix");
  if (text.count() != structural.dim(0))
    fail<ShapeError>("fuse: ", structural.dim(0), " structural rows but ", text.count(), " textual rows");
  if (text.dim() != structural.dim(1))
    fail<ShapeError>("fuse: structural dimension ", structural.dim(1), " differs from textual dimension ", text.dim());

  FusedEmbedding out;
  out.rho = opt.rho;
  out.vectors = Tensor(structural.shape);
  out.used_fallback.assign(structural.dim(0), 0);
  for (std::size_t e = 0; e < structural.dim(0); ++e) {
    auto s = structural.row(e);
    auto o = out.vectors.row(e);
    if (!text.present[e]) {
      if (!opt.fallback_to_struct) fail<Error>("fuse: entity ", e, " has no textual vector");
      std::copy(s.begin(), s.end(), o.begin());
      out.used_fallback[e] = 1;
      continue;
    }
    auto t = text.vectors.row(e);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] = opt.rho * s[j] + (1.0 - opt.rho) * t[j];
  }
  return out;
}

inline FusedEmbedding fuse(const StructEmbedding& structural, const FeatureTable& text, const FuseOptions& opt = {}) {
  return fuse(structural.entities, text, opt);
}

}  // namespace hiercode
