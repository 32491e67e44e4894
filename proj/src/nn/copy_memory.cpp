#include <random>

#include "locfuse/cells.hpp"
#include "locfuse/error.hpp"

namespace locfuse::nn {

CopyMemoryBatch copy_memory_batch(int delay, int n_symbols, int batch, std::uint64_t seed, int prefix) {
  require(delay >= 1, "copy_memory_batch: delay must be >= 1");
  require(n_symbols >= 1, "copy_memory_batch: need at least one symbol");
  require(batch >= 1 && prefix >= 1, "copy_memory_batch: batch and prefix must be >= 1");
  CopyMemoryBatch out;
  out.delay = delay;
  out.n_symbols = n_symbols;
  out.prefix = prefix;
  // prefix, (delay - 1) blanks, trigger, prefix blanks while the copy is emitted
  out.length = 2 * prefix + delay;
  Rng rng(seed);
  std::uniform_int_distribution<int> symbol(1, n_symbols);
  for (int b = 0; b < batch; ++b) {
    std::vector<int> in(out.length, out.blank());
    std::vector<int> target(out.length, out.blank());
    for (int i = 0; i < prefix; ++i) {
      in[i] = symbol(rng);
      target[prefix + delay + i] = in[i];
    }
    in[prefix + delay - 1] = out.trigger();
    out.inputs.push_back(std::move(in));
    out.targets.push_back(std::move(target));
  }
  return out;
}

std::vector<Matrix> CopyMemoryBatch::one_hot_inputs() const {
  const int batch = int(inputs.size());
  std::vector<Matrix> seq(length, Matrix::Zero(vocabulary(), batch));
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < length; ++t) seq[t](inputs[b][t], b) = 1.0;
  }
  return seq;
}

}  // namespace locfuse::nn
