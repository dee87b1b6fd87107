#pragma once

#include <cstdint>
#include <vector>

#include "pal/corpus.h"

namespace pal::pipeline {

// Templated persona-chat dialogues over a small vocabulary. Each dialogue opens with small
// talk that needs no persona, then the partner asks about facts stated in the profile and
// the reply restates the matching persona fact. Exactly `n_samples` replies are produced,
// deterministically for a given seed. Samples carry no split and no relevance label.
std::vector<corpus::DialogueSample> synthetic_corpus(std::size_t n_samples, std::uint64_t seed);

}  // namespace pal::pipeline
