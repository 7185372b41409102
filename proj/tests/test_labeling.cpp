#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "io_util.hpp"
#include "labeling.hpp"

using namespace saefin;
using namespace saefin::labeling;

namespace {

// Fixture: three features reading input coordinates 0/1 directly, plus a dead
// third feature; dataset rows map one-to-one onto corpus positions.
struct Fixture {
    datasim::Vocabulary vocab = datasim::Vocabulary::standard(64);
    sae::Sae autoenc;
    lm::ResidualDataset dataset;
    std::vector<datasim::TokenSeq> corpus;

    Fixture() {
        sae::SaeConfig config;
        config.input_dim = 4;
        config.latent_dim = 3;
        autoenc = sae::init_sae(config);
        autoenc.encoder_weight = num::Matrix(3, 4, {1, 0, 0, 0,   // feature 0 reads x0
                                                    0, 1, 0, 0,   // feature 1 reads x1
                                                    0, 0, 0, 0}); // feature 2 dead
        autoenc.encoder_bias = num::Matrix(1, 3);

        // seq 0: positive-sentiment tokens (16..21); seq 1: negative (22..27)
        corpus = {{16, 17, 18, 19}, {22, 23, 24, 25}};
        dataset.vectors = num::Matrix(8, 4);
        dataset.provenance.resize(8);
        for (std::size_t s = 0; s < 2; ++s) {
            for (std::size_t p = 0; p < 4; ++p) {
                const std::size_t row = 4 * s + p;
                dataset.provenance[row] = {s, static_cast<std::uint32_t>(p)};
                // feature 0 fires everywhere with distinct strengths
                dataset.vectors.at(row, 0) = 1.0 + static_cast<double>(row);
                // feature 1 fires only on sequence 0
                dataset.vectors.at(row, 1) = s == 0 ? 0.5 : -1.0;
            }
        }
    }
};

}  // namespace

TEST_CASE("dead feature yields an empty record list and a dead dossier") {
    Fixture f;
    const auto records = top_activations(f.autoenc, f.dataset, f.corpus, 2, 5);
    CHECK(records.empty());
    const FeatureDossier d = build_dossier(2, records, f.vocab);
    CHECK(d.label == "dead-feature");
    CHECK(dossier_purity(d, f.vocab) == 0.0);
}

TEST_CASE("n beyond the activation count returns every firing record") {
    Fixture f;
    const auto records = top_activations(f.autoenc, f.dataset, f.corpus, 1, 50);
    CHECK(records.size() == 4);  // fires only on sequence 0
    for (const auto& r : records) CHECK(r.sequence == 0);
}

TEST_CASE("top activations agree with a brute-force sort oracle") {
    Fixture f;
    const std::size_t n = 5;
    const auto got = top_activations(f.autoenc, f.dataset, f.corpus, 0, n);

    // oracle: recompute every activation, sort with the documented tie rule
    struct Entry {
        double act;
        std::uint64_t seq;
        std::uint32_t pos;
    };
    std::vector<Entry> all;
    for (std::size_t row = 0; row < f.dataset.count(); ++row) {
        const double act = f.dataset.vectors.at(row, 0);  // encoder row = e_0
        if (act > 0.0)
            all.push_back({act, f.dataset.provenance[row].sequence,
                           f.dataset.provenance[row].position});
    }
    std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) {
        if (a.act != b.act) return a.act > b.act;
        if (a.seq != b.seq) return a.seq < b.seq;
        return a.pos < b.pos;
    });
    REQUIRE(got.size() == n);
    for (std::size_t i = 0; i < n; ++i) {
        CHECK(got[i].activation == all[i].act);
        CHECK(got[i].sequence == all[i].seq);
        CHECK(got[i].position == all[i].pos);
    }
    // no excluded record beats an included one
    for (std::size_t i = n; i < all.size(); ++i)
        CHECK(all[i].act <= got.back().activation);
}

TEST_CASE("ties break by sequence then position") {
    Fixture f;
    for (std::size_t row = 0; row < 8; ++row) f.dataset.vectors.at(row, 0) = 1.0;
    const auto records = top_activations(f.autoenc, f.dataset, f.corpus, 0, 3);
    REQUIRE(records.size() == 3);
    CHECK(records[0].sequence == 0);
    CHECK(records[0].position == 0);
    CHECK(records[1].position == 1);
    CHECK(records[2].position == 2);
}

TEST_CASE("dossier labels: single class majority and mixed split") {
    Fixture f;
    // all records from positive-sentiment tokens
    auto records = top_activations(f.autoenc, f.dataset, f.corpus, 1, 10);
    FeatureDossier d = build_dossier(1, records, f.vocab);
    CHECK(d.label == "tokens of class positive-sentiment");
    CHECK(dossier_purity(d, f.vocab) == 1.0);

    // 3 positive / 2 negative: exactly the 60% bar, majority label, purity 0.6
    auto all = top_activations(f.autoenc, f.dataset, f.corpus, 0, 8);
    std::vector<ActivationRecord> split;
    for (const auto& r : all) {
        if (r.sequence == 0 && split.size() < 3) split.push_back(r);
    }
    for (const auto& r : all) {
        if (r.sequence == 1 && split.size() < 5) split.push_back(r);
    }
    REQUIRE(split.size() == 5);
    d = build_dossier(0, split, f.vocab);
    CHECK(d.label == "tokens of class positive-sentiment");
    CHECK(dossier_purity(d, f.vocab) == doctest::Approx(0.6));

    // 2/2/1 split: no class reaches 60%, mixed label with the top two classes
    std::vector<ActivationRecord> mixed(split.begin(), split.end() - 1);
    mixed[2].token = 22;  // negative-sentiment
    mixed[3].token = 46;  // temporal
    d = build_dossier(0, mixed, f.vocab);
    CHECK(d.label == "mixed: positive-sentiment, negative-sentiment");
    CHECK(dossier_purity(d, f.vocab) == doctest::Approx(0.5));
}

TEST_CASE("records sorted descending and dossiers deterministic") {
    Fixture f;
    const auto a = build_all_dossiers(f.autoenc, f.dataset, f.corpus, f.vocab, 4);
    const auto b = build_all_dossiers(f.autoenc, f.dataset, f.corpus, f.vocab, 4);
    REQUIRE(a.size() == 3);
    for (std::size_t j = 0; j < a.size(); ++j) {
        CHECK(a[j].label == b[j].label);
        REQUIRE(a[j].records.size() == b[j].records.size());
        for (std::size_t i = 0; i + 1 < a[j].records.size(); ++i)
            CHECK(a[j].records[i].activation >= a[j].records[i + 1].activation);
    }
}

TEST_CASE("mismatched feature ids are rejected") {
    Fixture f;
    auto records = top_activations(f.autoenc, f.dataset, f.corpus, 0, 3);
    CHECK_THROWS_AS(build_dossier(1, records, f.vocab), std::invalid_argument);
    CHECK_THROWS_AS(top_activations(f.autoenc, f.dataset, f.corpus, 9, 3),
                    std::invalid_argument);
}

TEST_CASE("manual overrides replace labels; unknown ids rejected") {
    Fixture f;
    auto dossiers = build_all_dossiers(f.autoenc, f.dataset, f.corpus, f.vocab, 4);
    const auto dir = std::filesystem::temp_directory_path() / "saefin_label_test";
    std::filesystem::create_directories(dir);
    io::atomic_write(dir / "overrides.json", R"({"1": "hand-checked sentiment"})");
    apply_label_overrides(dossiers, dir / "overrides.json");
    CHECK(dossiers[1].label == "hand-checked sentiment");
    CHECK(dossiers[1].source == LabelSource::Manual);
    CHECK(dossiers[0].source == LabelSource::Template);

    io::atomic_write(dir / "bad.json", R"({"99": "nope"})");
    CHECK_THROWS(apply_label_overrides(dossiers, dir / "bad.json"));
}

TEST_CASE("dossier export and load round-trip") {
    Fixture f;
    const auto dossiers = build_all_dossiers(f.autoenc, f.dataset, f.corpus, f.vocab, 4);
    const auto path = std::filesystem::temp_directory_path() / "saefin_dossiers.jsonl";
    export_dossiers(dossiers, path);
    const auto back = load_dossiers(path);
    REQUIRE(back.size() == dossiers.size());
    for (std::size_t j = 0; j < back.size(); ++j) {
        CHECK(back[j].feature == dossiers[j].feature);
        CHECK(back[j].label == dossiers[j].label);
        REQUIRE(back[j].records.size() == dossiers[j].records.size());
        for (std::size_t i = 0; i < back[j].records.size(); ++i) {
            CHECK(back[j].records[i].activation == dossiers[j].records[i].activation);
            CHECK(back[j].records[i].window == dossiers[j].records[i].window);
        }
    }
}
