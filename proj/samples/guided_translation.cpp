// Translates a few held-out sentences from the reference fixture with plain
// beam search and with guided decoding, and prints every step where the
// guided update changed the top continuation.
//
//   guided_translation [fixture_dir] [count]

#include <cstdlib>
#include <iostream>

#include "resetox/experiment.hpp"

using namespace resetox;

int main(int argc, char** argv) {
  const std::string dir = argc > 1 ? argv[1] : RESETOX_FIXTURES "/toy";
  const std::size_t count = argc > 2 ? std::strtoul(argv[2], nullptr, 10) : 20;
  try {
    const Fixture fx = Fixture::load(dir);
    const LexiconScorer scorer(fx.lexicon, fx.vocab);
    const GuidanceConfig cfg;  // alpha 0.2, top 10 candidates, self caches
    const BeamConfig beam{5, 100, false};

    for (std::size_t i = 0; i < count && i < fx.heldout.size(); ++i) {
      const auto src = fx.vocab.encode(fx.heldout[i].src);
      auto plain = beam_search(src, fx.params, beam).best;
      const auto guided = resetox_decode(src, fx.params, beam, scorer, cfg);
      auto best = guided.best;
      if (plain.finished) plain.tokens.pop_back();
      if (best.finished) best.tokens.pop_back();
      const std::string a = fx.vocab.decode(plain.tokens), b = fx.vocab.decode(best.tokens);
      if (a == b) continue;
      std::cout << "source:   " << fx.heldout[i].src << "\n"
                << "baseline: " << a << "\n"
                << "guided:   " << b << "\n";
      for (const auto& e : guided.events)
        if (e.updated && e.chosen_before != e.chosen_after)
          std::cout << "  step " << e.step << " hyp " << e.hypothesis << ": " << fx.vocab.token(e.chosen_before)
                    << " -> " << fx.vocab.token(e.chosen_after) << "\n";
      std::cout << "\n";
    }
  } catch (const std::exception& ex) {
    std::cerr << ex.what() << "\n";
    return 1;
  }
  return 0;
}
