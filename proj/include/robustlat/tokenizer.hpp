#pragma once

#include "robustlat/codebook.hpp"
#include "robustlat/image.hpp"

namespace robustlat {

// Reconstruction interface consumed by the rFID/pFID and Lipschitz tooling.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;

  virtual ImageShape image_shape() const = 0;
  virtual const Codebook& codebook() const = 0;
  virtual LatentGrid encode(const Image& image) const = 0;
  virtual Image decode(const LatentGrid& latent) const = 0;

  TokenGrid tokenize(const Image& image) const { return quantize(encode(image), codebook()); }
  Image decode_tokens(const TokenGrid& tokens) const { return decode(dequantize(tokens, codebook())); }
  Image reconstruct(const Image& image) const { return decode_tokens(tokenize(image)); }
};

}  // namespace robustlat
