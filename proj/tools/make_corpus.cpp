// Deterministic synthetic text generator. Emits grammatical English-like
// sentences from a fixed vocabulary so byte-level models have real structure
// to learn, with no external data dependency.

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

#include "adaponder/tensor.hpp"

using adaponder::Rng;

namespace {

const std::vector<std::string> kSubjects = {
    "the river",      "a traveler",    "the old clock",  "our neighbor",  "the gray cat",
    "a young engineer", "the library",  "the north wind", "a quiet student", "the captain",
    "the machine",    "an honest clerk", "the garden",    "the mountain",  "a small bird",
    "the committee",  "the painter",   "the lighthouse", "a patient teacher", "the harbor"};

const std::vector<std::string> kVerbs = {
    "watches",  "remembers", "carries",  "measures", "repairs", "follows",  "describes",
    "collects", "examines",  "protects", "crosses",  "records", "balances", "welcomes",
    "ignores",  "signals",   "counts",   "paints",   "quietly holds", "slowly turns"};

const std::vector<std::string> kObjects = {
    "the morning light", "a wooden box",     "the last letter",  "three silver coins",
    "the open door",     "a map of the coast", "the broken wheel", "its own shadow",
    "the distant bell",  "a cup of tea",     "the first page",   "the narrow bridge",
    "a row of candles",  "the evening train", "the hidden path",  "a bundle of papers"};

const std::vector<std::string> kClauses = {
    "before the rain begins",      "while the town sleeps",   "after the market closes",
    "as the tide comes in",        "until the lamps are lit", "whenever the bell rings",
    "because the season changed",  "though nobody asked",     "near the edge of the field",
    "under a pale winter sky",     "with great care",         "without a single word"};

const std::vector<std::string> kIdioms = {
    "Nothing moved.", "It was enough.", "The rest could wait.", "So the day ended.",
    "All was well.",  "Time went on.",  "The answer was no.",   "It happened twice."};

std::string sentence(Rng& rng) {
  std::string s = kSubjects[rng.below(kSubjects.size())];
  s += " ";
  s += kVerbs[rng.below(kVerbs.size())];
  s += " ";
  s += kObjects[rng.below(kObjects.size())];
  if (rng.below(100) < 55) {
    s += " ";
    s += kClauses[rng.below(kClauses.size())];
  }
  if (rng.below(100) < 12) {
    s += ", and ";
    s += kSubjects[rng.below(kSubjects.size())];
    s += " ";
    s += kVerbs[rng.below(kVerbs.size())];
    s += " ";
    s += kObjects[rng.below(kObjects.size())];
  }
  s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  s += rng.below(100) < 6 ? "?" : ".";
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  std::string out = "corpus.txt";
  long long bytes = 4'000'000;
  uint64_t seed = 20240601;
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--out") && i + 1 < argc) out = argv[++i];
    if (!std::strcmp(argv[i], "--bytes") && i + 1 < argc) bytes = std::atoll(argv[++i]);
    if (!std::strcmp(argv[i], "--seed") && i + 1 < argc) seed = std::strtoull(argv[++i], nullptr, 10);
  }
  FILE* f = std::fopen(out.c_str(), "wb");
  if (!f) {
    std::fprintf(stderr, "cannot write %s\n", out.c_str());
    return 2;
  }
  Rng rng(seed);
  long long written = 0;
  int in_par = 0;
  while (written < bytes) {
    std::string s;
    if (rng.below(100) < 7) {
      s = kIdioms[rng.below(kIdioms.size())];
    } else {
      s = sentence(rng);
    }
    s += ++in_par >= 5 + static_cast<int>(rng.below(4)) ? "\n\n" : " ";
    if (s.back() == '\n') in_par = 0;
    std::fwrite(s.data(), 1, s.size(), f);
    written += static_cast<long long>(s.size());
  }
  std::fclose(f);
  std::printf("wrote %lld bytes to %s\n", written, out.c_str());
  return 0;
}
