#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "io_util.hpp"
#include "steering.hpp"

using namespace saefin;
using namespace saefin::steering;

namespace {

struct Fixture {
    datasim::Vocabulary vocab = datasim::Vocabulary::standard(64);
    lm::TinyLm model;
    sae::Sae autoenc;

    Fixture() {
        lm::TinyLmConfig mc;
        mc.vocab_size = 64;
        mc.hidden_dim = 16;
        mc.num_layers = 2;
        mc.num_heads = 2;
        mc.max_seq_len = 32;
        mc.seed = 5;
        model = lm::init_lm(mc);

        sae::SaeConfig sc;
        sc.input_dim = 16;
        sc.latent_dim = 24;
        sc.seed = 6;
        autoenc = sae::init_sae(sc);
    }
};

}  // namespace

TEST_CASE("steering delta basics: zero, basis column, sign flip, linearity") {
    Fixture f;
    const lm::TapPoint tap{1};

    const auto zero = steering_delta(f.autoenc, {3, 0.0, tap});
    for (double v : zero) CHECK(v == 0.0);

    const auto unit = steering_delta(f.autoenc, {3, 1.0, tap});
    for (std::size_t i = 0; i < unit.size(); ++i)
        CHECK(unit[i] == f.autoenc.decoder_weight.at(i, 3));

    const auto plus = steering_delta(f.autoenc, {3, 2.0, tap});
    const auto minus = steering_delta(f.autoenc, {3, -2.0, tap});
    for (std::size_t i = 0; i < plus.size(); ++i)
        CHECK(std::abs(plus[i] + minus[i]) < 1e-12);

    const auto s1 = steering_delta(f.autoenc, {3, 0.7, tap});
    const auto s2 = steering_delta(f.autoenc, {3, 1.6, tap});
    const auto s12 = steering_delta(f.autoenc, {3, 2.3, tap});
    for (std::size_t i = 0; i < s12.size(); ++i)
        CHECK(std::abs(s12[i] - s1[i] - s2[i]) < 1e-12);

    CHECK_THROWS_AS(steering_delta(f.autoenc, {99, 1.0, tap}), std::invalid_argument);
}

TEST_CASE("zero strength reproduces the baseline bit-exactly") {
    Fixture f;
    const lm::TokenSeq tokens{0, 17, 23, 40, 1};
    const auto out = steered_forward(f.model, f.autoenc, tokens, {5, 0.0, {1}});
    CHECK(out.baseline == out.steered);
}

TEST_CASE("steering at the final tap matches the linear-head closed form") {
    Fixture f;
    const lm::TokenSeq tokens{0, 17, 23, 40, 1};
    const std::size_t m = f.model.config.num_layers;
    const SteeringSpec spec{4, 1.7, {m}};

    const auto out = steered_forward(f.model, f.autoenc, tokens, spec);

    // oracle: softmax(baseline_logits + head^T delta)
    const auto base_trace = lm::forward(f.model, tokens);
    const auto delta = steering_delta(f.autoenc, spec);
    std::vector<double> logits = base_trace.final_logits;
    for (std::size_t w = 0; w < logits.size(); ++w) {
        for (std::size_t i = 0; i < delta.size(); ++i)
            logits[w] += delta[i] * f.model.head.at(i, w);
    }
    double max_logit = logits[0];
    for (double v : logits) max_logit = std::max(max_logit, v);
    double z = 0.0;
    std::vector<double> expect(logits.size());
    for (std::size_t w = 0; w < logits.size(); ++w) {
        expect[w] = std::exp(logits[w] - max_logit);
        z += expect[w];
    }
    for (std::size_t w = 0; w < logits.size(); ++w) {
        expect[w] /= z;
        CHECK(out.steered[w] == doctest::Approx(expect[w]).epsilon(1e-9));
    }
}

TEST_CASE("exact classification tie goes Positive") {
    Fixture f;
    f.model.head = num::Matrix(16, 64);  // uniform distribution: p_pos == p_neg
    datasim::NewsItem item;
    item.tokens = {17, 23, 40};
    CHECK(classify_news(f.model, f.autoenc, f.vocab, item, {0, 0.0, {1}}) ==
          datasim::Classification::Positive);
}

TEST_CASE("single-strength grid {0} equals unsteered statistics") {
    Fixture f;
    datasim::WorldSpec wspec;
    wspec.num_firms = 8;
    wspec.num_days = 30;
    wspec.news_per_firm_day = 0.5;
    wspec.seed = 9;
    const datasim::World world = datasim::generate_world(wspec);

    const auto grid = steering_grid_classification(f.model, f.autoenc, world, {0.0}, 2,
                                                   {1});
    REQUIRE(grid.rows.size() == 1);
    const auto& row = grid.rows[0];
    CHECK(row.n_positive + row.n_negative == world.news.size());

    // oracle: classify each item directly with no steering
    std::size_t positives = 0;
    for (const auto& item : world.news) {
        if (classify_news(f.model, f.autoenc, f.vocab, item, {2, 0.0, {1}}) ==
            datasim::Classification::Positive)
            ++positives;
    }
    CHECK(row.n_positive == positives);
    CHECK(row.positive_fraction ==
          doctest::Approx(double(positives) / world.news.size()));
}

TEST_CASE("allocation experiment: greedy repetition is deterministic") {
    Fixture f;
    const lm::TokenSeq prompt = datasim::make_allocation_prompt(f.vocab, 3, 0.5);
    AllocationOptions opt;
    opt.repetitions = 1;
    opt.mode = lm::SamplingMode::Greedy;
    opt.seed = 11;
    const auto a = allocation_experiment(f.model, f.autoenc, f.vocab, prompt, {0.0, 1.0},
                                         2, {1}, opt);
    const auto b = allocation_experiment(f.model, f.autoenc, f.vocab, prompt, {0.0, 1.0},
                                         2, {1}, opt);
    REQUIRE(a.rows.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(a.rows[i].mean_allocation == b.rows[i].mean_allocation);
        CHECK(a.rows[i].n_answered == b.rows[i].n_answered);
    }
}

TEST_CASE("non-numeric answers abstain after bounded retries") {
    Fixture f;
    // science the head so the model can only ever answer with token 0 (never a bucket)
    f.model.head = num::Matrix(16, 64);
    for (std::size_t i = 0; i < 16; ++i) f.model.head.at(i, 0) = 0.0;
    const lm::TokenSeq prompt = datasim::make_allocation_prompt(f.vocab, 3, 0.5);
    AllocationOptions opt;
    opt.repetitions = 5;
    opt.mode = lm::SamplingMode::Greedy;  // uniform dist -> greedy picks token 0
    const auto grid = allocation_experiment(f.model, f.autoenc, f.vocab, prompt, {0.0},
                                            2, {1}, opt);
    CHECK(grid.rows[0].n_abstained == 5);
    CHECK(grid.rows[0].n_answered == 0);
}

TEST_CASE("allocation prompt must end at the answer slot") {
    Fixture f;
    AllocationOptions opt;
    CHECK_THROWS_AS(allocation_experiment(f.model, f.autoenc, f.vocab, {0, 17, 23},
                                          {0.0}, 2, {1}, opt),
                    std::invalid_argument);
}

TEST_CASE("csv exports carry the documented headers") {
    Fixture f;
    ClassificationGrid cgrid;
    cgrid.feature = 3;
    ClassificationRow row;
    row.strength = -1.0;
    row.positive_fraction = 0.5;
    row.n_positive = 5;
    row.n_negative = 5;
    cgrid.rows.push_back(row);  // conditional means left missing
    const auto dir = std::filesystem::temp_directory_path();
    write_classification_csv(cgrid, dir / "saefin_steer.csv");
    auto table = io::read_csv(dir / "saefin_steer.csv");
    CHECK(table.header == std::vector<std::string>{"strength", "pos_frac",
                                                   "mean_ret_pos", "mean_ret_neg",
                                                   "n_pos", "n_neg"});
    CHECK(table.rows[0][2] == "missing");

    AllocationGrid agrid;
    agrid.feature = 7;
    agrid.rows.push_back({2.0, 41.5, 3.2, 99, 1});
    write_allocation_csv(agrid, dir / "saefin_alloc.csv");
    table = io::read_csv(dir / "saefin_alloc.csv");
    CHECK(table.header ==
          std::vector<std::string>{"feature", "strength", "mean_alloc", "std", "n"});
    CHECK(table.rows[0][0] == "7");
}
