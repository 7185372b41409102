#include "predictor.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include "io_util.hpp"
#include "parallel.hpp"

namespace saefin::predictor {

using num::Matrix;

namespace {

Matrix gather_rows(const Matrix& source, const std::vector<std::size_t>& rows,
                   const std::vector<std::size_t>& cols) {
    Matrix out(rows.size(), cols.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t c = 0; c < cols.size(); ++c)
            out.at(i, c) = source.at(rows[i], cols[c]);
    return out;
}

void standardize_in_place(Matrix& m, std::vector<double>& means,
                          std::vector<double>& stds) {
    means.assign(m.cols(), 0.0);
    stds.assign(m.cols(), 1.0);
    for (std::size_t j = 0; j < m.cols(); ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < m.rows(); ++i) mean += m.at(i, j);
        mean /= static_cast<double>(m.rows());
        double var = 0.0;
        for (std::size_t i = 0; i < m.rows(); ++i) {
            const double d = m.at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(m.rows());
        means[j] = mean;
        stds[j] = var > 1e-24 ? std::sqrt(var) : 1.0;
        for (std::size_t i = 0; i < m.rows(); ++i)
            m.at(i, j) = (m.at(i, j) - means[j]) / stds[j];
    }
}

}  // namespace

std::vector<FittedWindow> fit_rolling(const RollingConfig& config,
                                      const Matrix& embeddings,
                                      const std::vector<NewsRow>& rows,
                                      const std::vector<int>& labels,
                                      const std::vector<std::size_t>* allowed_features) {
    if (rows.size() != embeddings.rows() || labels.size() != rows.size())
        throw std::invalid_argument("embeddings, rows, and labels must align");
    if (rows.empty()) throw std::invalid_argument("empty timeline");
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].day < rows[i - 1].day)
            throw std::invalid_argument("timeline must be sorted by day");
    }

    std::vector<std::size_t> universe;
    if (allowed_features) {
        universe = *allowed_features;
        std::sort(universe.begin(), universe.end());
        universe.erase(std::unique(universe.begin(), universe.end()), universe.end());
        for (std::size_t f : universe) {
            if (f >= embeddings.cols())
                throw std::invalid_argument("allowed feature out of range");
        }
    } else {
        universe.resize(embeddings.cols());
        for (std::size_t j = 0; j < universe.size(); ++j) universe[j] = j;
    }
    if (universe.empty()) throw std::invalid_argument("empty feature universe");

    const std::uint32_t first_day = rows.front().day;
    const std::uint32_t last_day = rows.back().day;
    const std::uint32_t history =
        static_cast<std::uint32_t>(config.train_days + config.validation_days);
    if (first_day + history > last_day)
        throw std::invalid_argument("not enough days for a single training window");

    std::vector<FittedWindow> windows;
    for (std::uint32_t t0 = first_day + history; t0 <= last_day;
         t0 += static_cast<std::uint32_t>(config.refit_every)) {
        FittedWindow w;
        w.train_begin = t0 - history;
        w.train_end = t0 - static_cast<std::uint32_t>(config.validation_days);
        w.valid_end = t0;
        w.cover_begin = t0;
        w.cover_end = t0 + static_cast<std::uint32_t>(config.refit_every);

        std::vector<std::size_t> train_rows, valid_rows;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].day >= w.train_begin && rows[i].day < w.train_end)
                train_rows.push_back(i);
            else if (rows[i].day >= w.train_end && rows[i].day < w.valid_end)
                valid_rows.push_back(i);
        }

        std::vector<int> train_labels, valid_labels;
        for (std::size_t i : train_rows) train_labels.push_back(labels[i]);
        for (std::size_t i : valid_rows) valid_labels.push_back(labels[i]);

        const std::size_t positives =
            static_cast<std::size_t>(std::count(train_labels.begin(),
                                                train_labels.end(), 1));
        if (train_rows.empty() || positives == 0 || positives == train_labels.size()) {
            w.skipped = true;
            w.skip_reason = train_rows.empty() ? "no-training-rows"
                                               : "single-class-labels";
            windows.push_back(std::move(w));
            continue;
        }

        // rank within the training window only, then keep the top budget
        const Matrix train_universe = gather_rows(embeddings, train_rows, universe);
        const std::size_t pcs =
            std::min(config.num_pcs, std::min(train_rows.size() - 1, universe.size()));
        const featselect::FeatureRanking ranking = featselect::rank_features(
            train_universe, train_labels, pcs, "t" + std::to_string(t0));
        const featselect::ReducedEmbedding reduced = featselect::select_top_k(
            ranking, std::min(config.feature_budget, universe.size()));
        for (std::size_t local : reduced.feature_ids)
            w.features.push_back(universe[local]);

        Matrix train_x = gather_rows(embeddings, train_rows, w.features);
        standardize_in_place(train_x, w.means, w.stds);

        Matrix valid_x = gather_rows(embeddings, valid_rows, w.features);
        for (std::size_t i = 0; i < valid_x.rows(); ++i)
            for (std::size_t j = 0; j < valid_x.cols(); ++j)
                valid_x.at(i, j) = (valid_x.at(i, j) - w.means[j]) / w.stds[j];

        featselect::LogisticOptions options;
        if (!valid_rows.empty()) {
            options.validation_x = &valid_x;
            options.validation_y = &valid_labels;
        }
        w.model = featselect::fit_logistic(train_x, train_labels, options);
        windows.push_back(std::move(w));
    }
    return windows;
}

PredictOutcome predict(const std::vector<FittedWindow>& windows,
                       const Matrix& embeddings, const std::vector<NewsRow>& rows) {
    if (rows.size() != embeddings.rows())
        throw std::invalid_argument("embeddings and rows must align");
    PredictOutcome out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        // latest non-skipped window whose coverage starts on or before this day
        const FittedWindow* chosen = nullptr;
        for (const FittedWindow& w : windows) {
            if (w.skipped) continue;
            if (w.cover_begin <= rows[i].day) chosen = &w;
            else break;
        }
        if (!chosen) {
            ++out.excluded_before_coverage;
            continue;
        }
        // out-of-sample discipline: the window's data ends before its coverage
        if (rows[i].day < chosen->valid_end)
            throw std::logic_error("window scoring a day inside its own data");

        std::vector<double> x(chosen->features.size());
        for (std::size_t j = 0; j < x.size(); ++j)
            x[j] = (embeddings.at(i, chosen->features[j]) - chosen->means[j]) /
                   chosen->stds[j];
        PredictionRecord rec;
        rec.news_id = rows[i].news_id;
        rec.firm = rows[i].firm;
        rec.day = rows[i].day;
        rec.probability = featselect::predict_probability(chosen->model, x.data(),
                                                          x.size());
        out.records.push_back(rec);
    }
    return out;
}

namespace {

std::optional<double> tradable(const datasim::ReturnPanel& panel, std::uint32_t firm,
                               std::uint32_t day) {
    const std::size_t target = day + static_cast<std::size_t>(panel.horizon);
    if (firm >= panel.num_firms || target >= panel.num_days) return std::nullopt;
    const double r = panel.returns.at(firm, target);
    if (!std::isfinite(r)) return std::nullopt;
    return r;
}

PortfolioDay settle_legs(std::uint32_t day, std::vector<std::uint32_t> longs,
                         std::vector<std::uint32_t> shorts,
                         const datasim::ReturnPanel& panel, std::size_t min_names) {
    PortfolioDay out;
    out.day = day;
    auto keep_with_returns = [&](std::vector<std::uint32_t>& names) {
        std::vector<std::uint32_t> kept;
        for (std::uint32_t f : names)
            if (tradable(panel, f, day)) kept.push_back(f);
        names = std::move(kept);
    };
    keep_with_returns(longs);
    keep_with_returns(shorts);
    if (longs.size() < min_names || shorts.size() < min_names) {
        out.skipped = true;
        out.reason = "fewer-than-min-names";
        return out;
    }
    double long_ret = 0.0, short_ret = 0.0;
    for (std::uint32_t f : longs) long_ret += *tradable(panel, f, day);
    for (std::uint32_t f : shorts) short_ret += *tradable(panel, f, day);
    out.long_names = std::move(longs);
    out.short_names = std::move(shorts);
    out.ret = long_ret / static_cast<double>(out.long_names.size()) -
              short_ret / static_cast<double>(out.short_names.size());
    return out;
}

}  // namespace

std::vector<PortfolioDay> build_portfolios(const std::vector<PredictionRecord>& records,
                                           const datasim::ReturnPanel& panel,
                                           const RollingConfig& config) {
    if (records.empty()) throw std::invalid_argument("no prediction records");
    if (config.quantile <= 0.0 || config.quantile > 0.5)
        throw std::invalid_argument("quantile must be in (0, 0.5]");

    // firm-day mean probability
    std::map<std::uint32_t, std::map<std::uint32_t, std::pair<double, std::size_t>>> days;
    for (const auto& r : records) {
        auto& cell = days[r.day][r.firm];
        cell.first += r.probability;
        cell.second += 1;
    }

    std::vector<PortfolioDay> out;
    for (const auto& [day, firms] : days) {
        struct FirmProb {
            std::uint32_t firm;
            double prob;
        };
        std::vector<FirmProb> probs;
        probs.reserve(firms.size());
        for (const auto& [firm, cell] : firms)
            probs.push_back({firm, cell.first / static_cast<double>(cell.second)});

        PortfolioDay day_out;
        day_out.day = day;
        const std::size_t leg =
            static_cast<std::size_t>(config.quantile * static_cast<double>(probs.size()));
        if (leg < config.min_names) {
            day_out.skipped = true;
            day_out.reason = "fewer-than-min-names";
            out.push_back(std::move(day_out));
            continue;
        }
        const bool all_tied = std::all_of(probs.begin(), probs.end(), [&](const FirmProb& f) {
            return f.prob == probs.front().prob;
        });
        if (all_tied) {
            day_out.skipped = true;
            day_out.reason = "degenerate-tie";
            out.push_back(std::move(day_out));
            continue;
        }

        std::vector<FirmProb> by_desc = probs;
        std::sort(by_desc.begin(), by_desc.end(), [](const FirmProb& a, const FirmProb& b) {
            if (a.prob != b.prob) return a.prob > b.prob;
            return a.firm < b.firm;
        });
        std::vector<FirmProb> by_asc = probs;
        std::sort(by_asc.begin(), by_asc.end(), [](const FirmProb& a, const FirmProb& b) {
            if (a.prob != b.prob) return a.prob < b.prob;
            return a.firm < b.firm;
        });
        std::vector<std::uint32_t> longs, shorts;
        for (std::size_t i = 0; i < leg; ++i) {
            longs.push_back(by_desc[i].firm);
            shorts.push_back(by_asc[i].firm);
        }
        out.push_back(settle_legs(day, std::move(longs), std::move(shorts), panel,
                                  config.min_names));
    }
    return out;
}

std::vector<PortfolioDay> classification_portfolio(
    const std::vector<datasim::Classification>& classifications,
    const std::vector<NewsRow>& rows, const datasim::ReturnPanel& panel,
    const RollingConfig& config) {
    if (classifications.size() != rows.size())
        throw std::invalid_argument("one classification per news row required");

    // majority vote per firm-day; exact ties drop the firm from both legs
    std::map<std::uint32_t, std::map<std::uint32_t, std::pair<std::size_t, std::size_t>>>
        days;  // day -> firm -> (positives, negatives)
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto& cell = days[rows[i].day][rows[i].firm];
        if (classifications[i] == datasim::Classification::Positive) cell.first += 1;
        else cell.second += 1;
    }

    std::vector<PortfolioDay> out;
    for (const auto& [day, firms] : days) {
        std::vector<std::uint32_t> longs, shorts;
        for (const auto& [firm, votes] : firms) {
            if (votes.first > votes.second) longs.push_back(firm);
            else if (votes.second > votes.first) shorts.push_back(firm);
        }
        if (longs.size() < config.min_names || shorts.size() < config.min_names) {
            PortfolioDay d;
            d.day = day;
            d.skipped = true;
            d.reason = "fewer-than-min-names";
            out.push_back(std::move(d));
            continue;
        }
        out.push_back(settle_legs(day, std::move(longs), std::move(shorts), panel,
                                  config.min_names));
    }
    return out;
}

std::vector<double> realized_returns(const std::vector<PortfolioDay>& days) {
    std::vector<double> out;
    for (const auto& d : days)
        if (!d.skipped) out.push_back(d.ret);
    return out;
}

AccuracySummary prediction_accuracy(const std::vector<PredictionRecord>& records,
                                    const datasim::ReturnPanel& panel) {
    AccuracySummary out;
    std::map<std::uint32_t, std::pair<std::size_t, std::size_t>> per_day;  // hit, total
    for (const auto& r : records) {
        const auto ret = tradable(panel, r.firm, r.day);
        if (!ret) continue;
        const bool predicted_up = r.probability >= 0.5;
        const bool went_up = *ret >= 0.0;
        auto& [hits, total] = per_day[r.day];
        if (predicted_up == went_up) ++hits;
        ++total;
    }
    std::size_t pooled_hits = 0, pooled_total = 0;
    double daily_sum = 0.0;
    for (const auto& [day, ht] : per_day) {
        daily_sum += static_cast<double>(ht.first) / static_cast<double>(ht.second);
        pooled_hits += ht.first;
        pooled_total += ht.second;
    }
    out.n_days = per_day.size();
    out.n_records = pooled_total;
    if (!per_day.empty())
        out.average_daily = daily_sum / static_cast<double>(per_day.size());
    if (pooled_total > 0)
        out.total = static_cast<double>(pooled_hits) / static_cast<double>(pooled_total);
    return out;
}

void write_predictions_csv(const std::vector<PredictionRecord>& records,
                           const std::filesystem::path& path) {
    io::CsvWriter w({"news_id", "firm", "day", "prob"});
    for (const auto& r : records) {
        w.add_row({io::CsvWriter::format_int(static_cast<long long>(r.news_id)),
                   io::CsvWriter::format_int(r.firm),
                   io::CsvWriter::format_int(r.day),
                   io::CsvWriter::format_number(r.probability)});
    }
    w.write(path);
}

void write_portfolio_csv(const std::vector<PortfolioDay>& days,
                         const std::filesystem::path& path) {
    io::CsvWriter w({"day", "n_long", "n_short", "ret", "skipped", "reason"});
    for (const auto& d : days) {
        w.add_row({io::CsvWriter::format_int(d.day),
                   io::CsvWriter::format_int(static_cast<long long>(d.long_names.size())),
                   io::CsvWriter::format_int(static_cast<long long>(d.short_names.size())),
                   io::CsvWriter::format_number(d.skipped ? 0.0 : d.ret),
                   d.skipped ? "1" : "0", d.reason});
    }
    w.write(path);
}

}  // namespace saefin::predictor
