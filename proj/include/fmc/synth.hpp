#pragma once

#include <cstdint>
#include <vector>

#include "fmc/dsp.hpp"

// Deterministic speech-like toy signals: voiced syllables with a gliding
// pitch and two-formant harmonic envelope, interleaved with noisy
// fricative bursts and short pauses.
namespace fmc::synth {

Waveform utterance(double seconds, int sample_rate, std::uint64_t seed);

// `files` utterances of `seconds` each; file i uses seed + i.
std::vector<Waveform> toy_corpus(Index files, double seconds, int sample_rate,
                                 std::uint64_t seed);

} // namespace fmc::synth
