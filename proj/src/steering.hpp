// Concept steering: turn one autoencoder feature into a residual-stream
// perturbation, inject it, and measure how classifications and allocation
// answers move across a grid of strengths.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "datasim.hpp"
#include "sae.hpp"
#include "tinylm.hpp"

namespace saefin::steering {

struct SteeringSpec {
    std::size_t feature = 0;
    double strength = 0.0;  // in decoder-column (unit-norm) multiples
    lm::TapPoint tap{};
};

// The injected delta is decode(s*e_j) - decode(0) = s * decoder column j, so
// zero strength is a true no-op (the decoder bias never rides along).
std::vector<double> steering_delta(const sae::Sae& sae, const SteeringSpec& spec);

struct SteeredDistribution {
    std::vector<double> baseline;
    std::vector<double> steered;
    SteeringSpec spec;
};

SteeredDistribution steered_forward(const lm::TinyLm& model, const sae::Sae& sae,
                                    const lm::TokenSeq& tokens,
                                    const SteeringSpec& spec);

// Argmax over the two answer tokens of the steered distribution; exact ties
// classify Positive.
datasim::Classification classify_news(const lm::TinyLm& model, const sae::Sae& sae,
                                      const datasim::Vocabulary& vocab,
                                      const datasim::NewsItem& item,
                                      const SteeringSpec& spec);

struct ClassificationRow {
    double strength = 0.0;
    double positive_fraction = 0.0;
    std::optional<double> mean_return_positive;  // empty when the cell is empty
    std::optional<double> mean_return_negative;
    std::size_t n_positive = 0;
    std::size_t n_negative = 0;
};

struct ClassificationGrid {
    std::vector<ClassificationRow> rows;  // one per strength, grid order
    std::size_t feature = 0;
    std::size_t tap = 0;
};

// Classify every news item at every strength; per-strength positive share and
// conditional mean tradable returns.
ClassificationGrid steering_grid_classification(
    const lm::TinyLm& model, const sae::Sae& sae, const datasim::World& world,
    const std::vector<double>& strengths, std::size_t feature, lm::TapPoint tap);

// Per-item classifications for a single strength (used by portfolio builds).
std::vector<datasim::Classification> classify_all(const lm::TinyLm& model,
                                                  const sae::Sae& sae,
                                                  const datasim::World& world,
                                                  const SteeringSpec& spec);

struct AllocationRow {
    double strength = 0.0;
    double mean_allocation = 0.0;  // dollars, over answered repetitions
    double std_allocation = 0.0;
    std::size_t n_answered = 0;
    std::size_t n_abstained = 0;
};

struct AllocationGrid {
    std::vector<AllocationRow> rows;
    std::size_t feature = 0;
    std::size_t tap = 0;
    std::size_t repetitions = 0;
    std::uint64_t seed = 0;
};

struct AllocationOptions {
    std::size_t repetitions = 100;
    lm::SamplingMode mode = lm::SamplingMode::Temperature;
    double temperature = 1.0;
    std::size_t max_retries = 8;  // non-numeric answers are resampled, then dropped
    std::uint64_t seed = 1;
};

// Ask for an allocation answer under each strength, `repetitions` times, each
// repetition on its own RNG sub-stream keyed by (strength, repetition).
AllocationGrid allocation_experiment(const lm::TinyLm& model, const sae::Sae& sae,
                                     const datasim::Vocabulary& vocab,
                                     const lm::TokenSeq& prompt,
                                     const std::vector<double>& strengths,
                                     std::size_t feature, lm::TapPoint tap,
                                     const AllocationOptions& options);

// strength,pos_frac,mean_ret_pos,mean_ret_neg,n_pos,n_neg
void write_classification_csv(const ClassificationGrid& grid,
                              const std::filesystem::path& path);
// feature,strength,mean_alloc,std,n
void write_allocation_csv(const AllocationGrid& grid,
                          const std::filesystem::path& path);

}  // namespace saefin::steering
