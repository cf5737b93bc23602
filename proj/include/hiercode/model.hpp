#pragma once

// Quantizer model shape and the read-only passes over a trained parameter set.

#include <string>
#include <vector>

#include "hiercode/autodiff.hpp"
#include "hiercode/error.hpp"
#include "hiercode/gsr.hpp"
#include "hiercode/rq.hpp"
#include "hiercode/tensor.hpp"

namespace hiercode {

struct ModelConfig {
  std::size_t dim = 16;  // fused embedding width; also the latent and code width
  std::vector<std::size_t> hidden{64, 64};
  std::size_t levels = 3;          // m
  std::size_t codebook_size = 64;  // K
  std::size_t recon_count = 5;     // L
  std::size_t decoder_layers = 2;
  std::size_t decoder_heads = 4;
  std::size_t ffn_mult = 4;

  EncoderConfig encoder() const { return {dim, hidden, dim}; }
  DecoderConfig decoder() const { return {dim, dim, levels, recon_count, decoder_layers, decoder_heads, ffn_mult}; }

  void validate() const {
    require(dim >= 1, "model.dim must be >= 1");
    require(levels >= 1, "model.levels must be >= 1");
    require(codebook_size >= 1, "model.codebook_size must be >= 1");
    for (auto h : hidden) require(h >= 1, "model.hidden widths must be >= 1");
    decoder().validate();
  }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline Codebooks codebooks_of(const ParamSet& params, const ModelConfig& cfg) {
  return Codebooks::from_params(params, cfg.levels);
}

// Code tuple of every row of `embeddings`, as codes[level][row].
inline std::vector<std::vector<std::size_t>> encode_codes(const ParamSet& params, const ModelConfig& cfg,
                                                          const Tensor& embeddings) {
  return assign_codes(encode(embeddings, params, cfg.encoder()), codebooks_of(params, cfg));
}

// Forward values of the surrogates for the given codes: level i is the [N, d]
// matrix of chosen rows of codebook i.
inline std::vector<Tensor> surrogate_values(const ParamSet& params, const ModelConfig& cfg,
                                            const std::vector<std::vector<std::size_t>>& codes) {
  const Codebooks books = codebooks_of(params, cfg);
  if (codes.size() != cfg.levels) fail<ShapeError>("expected ", cfg.levels, " code levels, got ", codes.size());
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    Tensor v(Shape{codes[l].size(), cfg.dim});
    for (std::size_t i = 0; i < codes[l].size(); ++i) {
      if (codes[l][i] >= books.size()) fail<Error>("code ", codes[l][i], " out of range at level ", l);
      auto src = books.levels[l].row(codes[l][i]);
      std::copy(src.begin(), src.end(), v.row(i).begin());
    }
    out.push_back(std::move(v));
  }
  return out;
}

// Decoder outputs o_0 for the given codes, one row per entity. Rows are
// processed in chunks to bound the attention cache.
inline Tensor reconstruct_entities(const ParamSet& params, const ModelConfig& cfg,
                                   const std::vector<std::vector<std::size_t>>& codes, std::size_t chunk = 256) {
  const auto all = surrogate_values(params, cfg, codes);
  const std::size_t n = all.front().dim(0), q = cfg.recon_count + 1;
  Tensor out(Shape{n, cfg.dim});
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t len = std::min(chunk, n - start);
    std::vector<Tensor> part;
    for (const auto& lv : all)
      part.emplace_back(Shape{len, cfg.dim},
                        std::vector<double>(lv.data.begin() + static_cast<std::ptrdiff_t>(start * cfg.dim),
                                            lv.data.begin() + static_cast<std::ptrdiff_t>((start + len) * cfg.dim)));
    const Tensor o = decode(part, params, cfg.decoder());
    for (std::size_t i = 0; i < len; ++i) {
      const double* src = o.data.data() + i * q * cfg.dim;
      std::copy(src, src + cfg.dim, out.row(start + i).begin());
    }
  }
  return out;
}

}  // namespace hiercode
