#include "adaponder/data.hpp"

#include <cstdio>
#include <stdexcept>

namespace adaponder {

Corpus ingest(const std::vector<std::string>& paths, double val_fraction) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("ingest: val_fraction must be in (0,1)");
  }
  Corpus c;
  bool first = true;
  for (const std::string& p : paths) {
    FILE* f = std::fopen(p.c_str(), "rb");
    if (!f) throw std::runtime_error("ingest: cannot read file: " + p);
    if (!first) c.tokens.push_back(0x0A);
    first = false;
    uint8_t buf[1 << 16];
    size_t got;
    while ((got = std::fread(buf, 1, sizeof(buf), f)) > 0) {
      c.tokens.insert(c.tokens.end(), buf, buf + got);
    }
    std::fclose(f);
  }
  if (c.tokens.empty()) throw std::runtime_error("ingest: empty corpus");
  const int64_t total = static_cast<int64_t>(c.tokens.size());
  const int64_t val = static_cast<int64_t>(static_cast<double>(total) * val_fraction);
  c.split = total - val;
  return c;
}

Batch next_batch(const Corpus& corpus, int64_t batch_size, int64_t seq_len, Rng& rng) {
  const int64_t limit = corpus.train_len() - seq_len - 1;
  if (limit < 0) throw std::runtime_error("next_batch: corpus too short for seq_len");
  Batch b;
  b.B = batch_size;
  b.n = seq_len;
  b.inputs.resize(static_cast<size_t>(batch_size * seq_len));
  b.targets.resize(static_cast<size_t>(batch_size * seq_len));
  for (int64_t i = 0; i < batch_size; ++i) {
    const int64_t start = static_cast<int64_t>(rng.below(static_cast<uint64_t>(limit + 1)));
    for (int64_t t = 0; t < seq_len; ++t) {
      b.inputs[static_cast<size_t>(i * seq_len + t)] = corpus.tokens[static_cast<size_t>(start + t)];
      b.targets[static_cast<size_t>(i * seq_len + t)] =
          corpus.tokens[static_cast<size_t>(start + t + 1)];
    }
  }
  return b;
}

std::vector<Batch> split_windows(const Corpus& corpus, const std::string& split,
                                 int64_t batch_size, int64_t seq_len) {
  int64_t begin, end;
  if (split == "train") {
    begin = 0;
    end = corpus.train_len();
  } else if (split == "val") {
    begin = corpus.split;
    end = static_cast<int64_t>(corpus.tokens.size());
  } else {
    throw std::invalid_argument("split_windows: split must be 'train' or 'val'");
  }
  std::vector<Batch> out;
  Batch cur;
  cur.B = 0;
  cur.n = seq_len;
  for (int64_t start = begin; start + seq_len + 1 <= end; start += seq_len) {
    for (int64_t t = 0; t < seq_len; ++t) {
      cur.inputs.push_back(corpus.tokens[static_cast<size_t>(start + t)]);
      cur.targets.push_back(corpus.tokens[static_cast<size_t>(start + t + 1)]);
    }
    cur.B++;
    if (cur.B == batch_size) {
      out.push_back(std::move(cur));
      cur = Batch{};
      cur.B = 0;
      cur.n = seq_len;
    }
  }
  if (cur.B > 0) out.push_back(std::move(cur));
  return out;
}

}  // namespace adaponder
