#include "wflow/rng.h"

namespace wflow {
namespace {

uint64_t Mix(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

uint64_t Rng::Derive(uint64_t seed, std::initializer_list<uint64_t> tags) {
  uint64_t h = Mix(seed);
  for (uint64_t t : tags) h = Mix(h ^ Mix(t + 0x632be59bd9b4e019ULL));
  return h;
}

}  // namespace wflow
