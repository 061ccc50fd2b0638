#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "adaponder/tensor.hpp"

namespace adaponder {

// Byte-level corpus: one flat stream of ids in [0,255] split into a training
// prefix and a validation suffix. The two splits never overlap.
struct Corpus {
  std::vector<uint8_t> tokens;
  int64_t split;  // tokens[0,split) train, tokens[split,end) validation

  int64_t train_len() const { return split; }
  int64_t val_len() const { return static_cast<int64_t>(tokens.size()) - split; }
};

// inputs[b,t] is a corpus token, targets[b,t] the token that follows it in
// the source stream.
struct Batch {
  std::vector<int32_t> inputs;   // B*n
  std::vector<int32_t> targets;  // B*n
  int64_t B = 0, n = 0;
};

// Concatenate files in path order with a single 0x0A separator between files;
// the last val_fraction of the stream is the validation split.
Corpus ingest(const std::vector<std::string>& paths, double val_fraction);

// Uniformly sampled contiguous windows from the training split. Pure function
// of (corpus, rng): advancing the same rng twice yields identical batches.
Batch next_batch(const Corpus& corpus, int64_t batch_size, int64_t seq_len, Rng& rng);

// Deterministic sequential windows over a split ("train" or "val"); the last
// partial window is dropped. Used by evaluation.
std::vector<Batch> split_windows(const Corpus& corpus, const std::string& split,
                                 int64_t batch_size, int64_t seq_len);

}  // namespace adaponder
