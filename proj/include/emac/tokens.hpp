#pragma once

#include <stdexcept>
#include <vector>

#include "emac/tensor.hpp"

namespace emac {

enum class Modality { image, density };

// patch-token embeddings plus per-token bookkeeping; image tokens first,
// density tokens second, each block row-major over its patch grid
struct TokenSequence {
  Tensor tokens;                     // L x C
  std::vector<Modality> modality;    // per token
  std::vector<int> position;         // original position within its modality grid
  int grid_rows = 0;
  int grid_cols = 0;
  int patch = 0;

  int length() const { return tokens.shape().empty() ? 0 : tokens.dim(0); }
  int channels() const { return tokens.dim(1); }

  int count(Modality m) const {
    int n = 0;
    for (auto t : modality)
      if (t == m) ++n;
    return n;
  }
};

}  // namespace emac
