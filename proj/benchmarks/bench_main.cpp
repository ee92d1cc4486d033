#include <random>

#include <benchmark/benchmark.h>

#include "deemd/infmap.hpp"
#include "deemd/nuclei.hpp"
#include "deemd/scorer.hpp"
#include "deemd/synthscreen.hpp"

using namespace deemd;

namespace {

Image noise(int channels, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(channels, size, size);
  for (auto& v : img.data()) v = u(rng);
  return img;
}

void BM_ScorerForward(benchmark::State& state) {
  Architecture arch;
  arch.patch_size = static_cast<int>(state.range(0));
  const ScorerModel model(arch, 1);
  const Image patch = noise(arch.in_channels, arch.patch_size, 2);
  for (auto _ : state) benchmark::DoNotOptimize(model.score(patch));
}
BENCHMARK(BM_ScorerForward)->Arg(32)->Arg(128)->Arg(256);

void BM_InfectionMap(benchmark::State& state) {
  const GridConfig grid{256, 128};
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> scores(49);
  for (auto& s : scores) s = u(rng);
  const auto set = PatchScoreSet::from_scores("s", scores, 2);
  const double sigma = static_cast<double>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(build_infection_map(set, grid, 1024, 1024, 0.2, sigma));
}
BENCHMARK(BM_InfectionMap)->Arg(0)->Arg(60)->Unit(benchmark::kMillisecond);

void BM_CountNuclei(benchmark::State& state) {
  SynthConfig cfg;
  cfg.image_size = static_cast<int>(state.range(0));
  cfg.min_cells = cfg.max_cells = cfg.image_size * cfg.image_size / 800;
  SampleSpec spec;
  spec.record.sample_id = "bench";
  const auto sample = render_sample(cfg, spec);
  Image dna(1, cfg.image_size, cfg.image_size);
  const auto ch = sample.image.channel(0);
  std::copy(ch.begin(), ch.end(), dna.data().begin());
  for (auto _ : state) benchmark::DoNotOptimize(count_nuclei(dna).count);
}
BENCHMARK(BM_CountNuclei)->Arg(128)->Arg(512)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
