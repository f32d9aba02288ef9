#include "tardis/binary_io.hpp"
#include "tardis/errors.hpp"
#include "tardis/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <tuple>

namespace tardis {

namespace {

bool same_double(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

std::optional<double> as_number(const std::string& s) {
    if (s.empty()) return std::nullopt;
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
    return v;
}

// Numeric values sort before text ("full", "selected", site names).
bool value_less(const std::string& a, const std::string& b) {
    const auto na = as_number(a);
    const auto nb = as_number(b);
    if (na && nb) return *na < *nb || (*na == *nb && a < b);
    if (na != nb && (na || nb)) return static_cast<bool>(na);
    return a < b;
}

std::string fmt(double x) {
    if (std::isnan(x)) return "";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::string fmt_short(double x, int digits = 4) {
    if (std::isnan(x)) return "";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.*f", digits, x);
    return buf;
}

std::string clean(std::string s) {
    std::replace(s.begin(), s.end(), ',', ';');
    std::replace(s.begin(), s.end(), '\t', ' ');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

double parse_double(const std::string& s, std::size_t line) {
    if (s.empty()) return NAN;
    if (auto v = as_number(s)) return *v;
    throw DataError("csv line " + std::to_string(line) + ": bad number '" + s + "'");
}

template <class T>
T parse_int(const std::string& s, std::size_t line) {
    T v{};
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw DataError("csv line " + std::to_string(line) + ": bad integer '" + s + "'");
    return v;
}

std::string period_label(std::int64_t p) { return p < 0 ? "all" : std::to_string(p); }

} // namespace

bool ReportRow::operator==(const ReportRow& o) const {
    return experiment == o.experiment && seed == o.seed && train_period == o.train_period &&
           eval_period == o.eval_period && step == o.step && method == o.method && param == o.param &&
           value == o.value && replicate == o.replicate && same_double(alpha, o.alpha) && same_double(shift, o.shift) &&
           same_double(accuracy, o.accuracy) && same_double(baseline_accuracy, o.baseline_accuracy) &&
           same_double(delta, o.delta) && flags == o.flags;
}

void sort_rows(std::vector<ReportRow>& rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
        const auto ka = std::tie(a.experiment, a.seed, a.train_period, a.eval_period, a.step, a.method, a.param);
        const auto kb = std::tie(b.experiment, b.seed, b.train_period, b.eval_period, b.step, b.method, b.param);
        if (ka != kb) return ka < kb;
        if (a.value != b.value) return value_less(a.value, b.value);
        return a.replicate < b.replicate;
    });
}

std::vector<Aggregate> ExperimentReport::aggregates() const {
    using Key = std::tuple<std::string, std::int64_t, std::int64_t, std::size_t, std::string, std::string, std::string>;
    std::vector<std::pair<Key, std::vector<const ReportRow*>>> groups;
    std::map<Key, std::size_t> index;
    for (const auto& r : rows) {
        Key k{r.experiment, r.train_period, r.eval_period, r.step, r.method, r.param, r.value};
        auto [it, fresh] = index.emplace(k, groups.size());
        if (fresh) groups.push_back({k, {}});
        groups[it->second].second.push_back(&r);
    }
    auto mean_sd = [](const std::vector<double>& xs) {
        double m = 0.0;
        for (double x : xs) m += x;
        m /= static_cast<double>(xs.size());
        double ss = 0.0;
        for (double x : xs) ss += (x - m) * (x - m);
        const double sd = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
        return std::pair{m, sd};
    };
    std::vector<Aggregate> out;
    for (const auto& [k, members] : groups) {
        Aggregate a;
        std::tie(a.experiment, a.train_period, a.eval_period, a.step, a.method, a.param, a.value) = k;
        a.count = members.size();
        std::vector<double> acc, delta, shift, alpha;
        for (const auto* r : members) {
            acc.push_back(r->accuracy);
            delta.push_back(r->delta);
            shift.push_back(r->shift);
            alpha.push_back(r->alpha);
        }
        std::tie(a.accuracy_mean, a.accuracy_sd) = mean_sd(acc);
        std::tie(a.delta_mean, a.delta_sd) = mean_sd(delta);
        a.shift_mean = mean_sd(shift).first;
        a.alpha_mean = mean_sd(alpha).first;
        out.push_back(std::move(a));
    }
    std::stable_sort(out.begin(), out.end(), [](const Aggregate& a, const Aggregate& b) {
        const auto ka = std::tie(a.experiment, a.train_period, a.eval_period, a.step, a.method, a.param);
        const auto kb = std::tie(b.experiment, b.train_period, b.eval_period, b.step, b.method, b.param);
        if (ka != kb) return ka < kb;
        return value_less(a.value, b.value);
    });
    return out;
}

nlohmann::json reference_values() {
    return {
        {"note", "published full-scale values from pretrained backbones on real corpora; context only, not targets"},
        {"average_accuracy",
         {{"AIC", {{"baseline", 83.81}, {"gt", 85.86}, {"dynamic", 86.58}}},
          {"PoliAff", {{"baseline", 69.38}, {"gt", 71.65}, {"dynamic", 70.89}}},
          {"NewsCls", {{"baseline", 78.54}, {"gt", 79.00}, {"dynamic", 79.30}}}}},
        {"max_gain_percent", 19.2},
        {"period_classifier_accuracy_percent", {38.6, 45.4, 45.1}},
        {"alpha", {{"AIC", 1}, {"PoliAff", 3}, {"NewsCls", -2}}},
    };
}

std::string format_csv(const ExperimentReport& report) {
    std::ostringstream os;
    os << kCsvHeader << '\n';
    for (const auto& r : report.rows) {
        os << clean(r.experiment) << ',' << r.seed << ',' << r.train_period << ',' << r.eval_period << ',' << r.step
           << ',' << clean(r.method) << ',' << clean(r.param) << ',' << clean(r.value) << ',' << r.replicate << ','
           << fmt(r.alpha) << ',' << fmt(r.shift) << ',' << fmt(r.accuracy) << ',' << fmt(r.baseline_accuracy) << ','
           << fmt(r.delta) << ',' << clean(r.flags) << '\n';
    }
    return os.str();
}

std::vector<ReportRow> parse_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != kCsvHeader) throw DataError("csv: missing or unexpected header");
    std::vector<ReportRow> rows;
    std::size_t n = 1;
    while (std::getline(is, line)) {
        ++n;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (!line.empty() && line.back() == ',') f.emplace_back();
        if (f.size() != 15) throw DataError("csv line " + std::to_string(n) + ": expected 15 fields, got " + std::to_string(f.size()));
        ReportRow r;
        r.experiment = f[0];
        r.seed = parse_int<std::uint64_t>(f[1], n);
        r.train_period = parse_int<std::int64_t>(f[2], n);
        r.eval_period = parse_int<std::int64_t>(f[3], n);
        r.step = parse_int<std::size_t>(f[4], n);
        r.method = f[5];
        r.param = f[6];
        r.value = f[7];
        r.replicate = parse_int<std::size_t>(f[8], n);
        r.alpha = parse_double(f[9], n);
        r.shift = parse_double(f[10], n);
        r.accuracy = parse_double(f[11], n);
        r.baseline_accuracy = parse_double(f[12], n);
        r.delta = parse_double(f[13], n);
        r.flags = f[14];
        rows.push_back(std::move(r));
    }
    return rows;
}

std::string format_markdown(const ExperimentReport& report) {
    std::ostringstream os;
    os << "# " << report.experiment << "\n\n";
    os << "Rows: " << report.rows.size() << ". Means and sample standard deviations over seeds and replicates.\n\n";
    os << "| train | eval | step | method | param | value | n | alpha | accuracy | sd | delta | sd | shift |\n";
    os << "|---|---|---|---|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& a : report.aggregates()) {
        os << "| " << a.train_period << " | " << period_label(a.eval_period) << " | " << a.step << " | " << a.method
           << " | " << a.param << " | " << a.value << " | " << a.count << " | " << fmt_short(a.alpha_mean, 2) << " | "
           << fmt_short(a.accuracy_mean) << " | " << fmt_short(a.accuracy_sd) << " | " << fmt_short(a.delta_mean)
           << " | " << fmt_short(a.delta_sd) << " | " << fmt_short(a.shift_mean) << " |\n";
    }
    os << "\n## Details\n\n```json\n" << report.details.dump(2) << "\n```\n";
    os << "\n## Reference\n\nPublished full-scale values obtained with pretrained backbones on real corpora. "
          "They give context for the direction of effects and are not targets for this toy setting.\n\n";
    const auto ref = reference_values();
    os << "| task | baseline | gt | dynamic | alpha |\n|---|---|---|---|---|\n";
    for (const auto& [task, v] : ref.at("average_accuracy").items())
        os << "| " << task << " | " << v.at("baseline").get<double>() << " | " << v.at("gt").get<double>() << " | "
           << v.at("dynamic").get<double>() << " | " << ref.at("alpha").at(task).get<int>() << " |\n";
    os << "\nMaximum gain: " << ref.at("max_gain_percent").get<double>() << "%. Period classifier accuracy: ";
    const auto& c = ref.at("period_classifier_accuracy_percent");
    for (std::size_t i = 0; i < c.size(); ++i) os << (i ? ", " : "") << c[i].get<double>() << "%";
    os << ".\n";
    return os.str();
}

std::string format_tsv(const ExperimentReport& report) {
    std::ostringstream os;
    os << "experiment\tseed\ttrain_period\teval_period\tstep\tmethod\tparam\tvalue\treplicate\tflags\tmetric\tmetric_value\n";
    for (const auto& r : report.rows) {
        const std::pair<const char*, double> metrics[] = {{"alpha", r.alpha},
                                                          {"shift", r.shift},
                                                          {"accuracy", r.accuracy},
                                                          {"baseline_accuracy", r.baseline_accuracy},
                                                          {"delta", r.delta}};
        for (const auto& [name, v] : metrics)
            os << clean(r.experiment) << '\t' << r.seed << '\t' << r.train_period << '\t' << r.eval_period << '\t'
               << r.step << '\t' << clean(r.method) << '\t' << clean(r.param) << '\t' << clean(r.value) << '\t'
               << r.replicate << '\t' << clean(r.flags) << '\t' << name << '\t' << fmt(v) << '\n';
    }
    return os.str();
}

std::vector<std::filesystem::path> emit_report(const ExperimentReport& report, const std::filesystem::path& out_dir,
                                               const std::vector<ReportFormat>& formats) {
    std::filesystem::create_directories(out_dir);
    const std::string stem = report.experiment;
    std::vector<std::filesystem::path> written;
    auto put = [&](const std::string& name, const std::string& text) {
        const auto p = out_dir / name;
        write_text_file(p, text);
        written.push_back(p);
    };
    for (ReportFormat f : formats) {
        switch (f) {
        case ReportFormat::csv: put(stem + ".csv", format_csv(report)); break;
        case ReportFormat::markdown: put(stem + ".md", format_markdown(report)); break;
        case ReportFormat::tsv: put(stem + ".tsv", format_tsv(report)); break;
        }
    }
    put(stem + ".config.json", report.config.dump(2) + "\n");
    put(stem + ".runtime.json", nlohmann::json{{"runtime_seconds", report.runtime_seconds}}.dump(2) + "\n");
    return written;
}

} // namespace tardis
