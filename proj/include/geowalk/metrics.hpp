#ifndef GEOWALK_METRICS_HPP
#define GEOWALK_METRICS_HPP

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "geowalk/error.hpp"
#include "geowalk/num_io.hpp"

// Evaluation scores and the trace records that training emits.  Everything
// serializes through format_double so equal runs produce equal bytes.

namespace geowalk {

// Coefficient of determination, 1 - SS_res / SS_tot.
inline double r2_score(const Eigen::VectorXd& preds, const Eigen::VectorXd& targets) {
    if (preds.size() != targets.size())
        throw DimensionError("r2_score: prediction/target length mismatch");
    if (targets.size() < 2) throw ValidationError("r2_score: need at least two samples");
    const double mean = targets.mean();
    const double ss_tot = (targets.array() - mean).square().sum();
    if (ss_tot <= 0.0)
        throw DomainError("r2_score: targets are constant, variance undefined");
    const double ss_res = (targets - preds).squaredNorm();
    return 1.0 - ss_res / ss_tot;
}

struct F1Result {
    double macro = 0.0;
    std::vector<double> per_class;
    std::vector<int> absent;  // classes unseen in both predictions and targets
};

// Macro-averaged F1 over classes 0..n_classes-1.  A class with no support on
// either side scores 0 and lands in `absent`.
inline F1Result f1_score(const std::vector<int>& preds, const std::vector<int>& targets,
                         int n_classes) {
    if (preds.size() != targets.size())
        throw DimensionError("f1_score: prediction/target length mismatch");
    if (preds.empty()) throw ValidationError("f1_score: empty input");
    if (n_classes < 1) throw ConfigError("f1_score: n_classes must be >= 1");
    std::vector<long> tp(static_cast<std::size_t>(n_classes), 0);
    std::vector<long> fp(static_cast<std::size_t>(n_classes), 0);
    std::vector<long> fn(static_cast<std::size_t>(n_classes), 0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const int p = preds[i], t = targets[i];
        if (p < 0 || p >= n_classes || t < 0 || t >= n_classes)
            throw ValidationError("f1_score: label outside [0, " + format_int(n_classes) +
                                  ") at row " + format_int(i));
        if (p == t) ++tp[static_cast<std::size_t>(p)];
        else {
            ++fp[static_cast<std::size_t>(p)];
            ++fn[static_cast<std::size_t>(t)];
        }
    }
    F1Result out;
    out.per_class.resize(static_cast<std::size_t>(n_classes), 0.0);
    for (int c = 0; c < n_classes; ++c) {
        const std::size_t k = static_cast<std::size_t>(c);
        if (tp[k] + fp[k] + fn[k] == 0) {
            out.absent.push_back(c);
            continue;  // contributes 0
        }
        const double denom = static_cast<double>(2 * tp[k] + fp[k] + fn[k]);
        out.per_class[k] = denom > 0.0 ? 2.0 * static_cast<double>(tp[k]) / denom : 0.0;
        out.macro += out.per_class[k];
    }
    out.macro /= static_cast<double>(n_classes);
    return out;
}

// --- gate traces -----------------------------------------------------------

struct GateRecord {
    std::string task;
    int token_index = 0;
    std::array<double, 3> w{};  // euclidean, spherical, hyperbolic
};

struct GateTrace {
    std::vector<GateRecord> records;

    void append(const std::string& task, int token_index, double we, double ws, double wh) {
        for (double v : {we, ws, wh})
            if (!(v >= 0.0 && v <= 1.0))
                throw ValidationError("GateTrace: weight " + format_double(v) +
                                      " outside [0,1]");
        if (std::abs(we + ws + wh - 1.0) > 1e-6)
            throw ValidationError("GateTrace: weights sum to " + format_double(we + ws + wh) +
                                  ", not 1");
        records.push_back(GateRecord{task, token_index, {we, ws, wh}});
    }

    bool empty() const { return records.empty(); }
};

inline std::string gate_trace_to_csv(const GateTrace& trace) {
    std::string out = "task,token_index,w_e,w_s,w_h\n";
    for (const GateRecord& r : trace.records) {
        out += r.task;
        out += ',';
        out += format_int(r.token_index);
        for (double v : r.w) {
            out += ',';
            out += format_double(v);
        }
        out += '\n';
    }
    return out;
}

// Arithmetic mean of the gate weights per task label.
inline std::map<std::string, std::array<double, 3>> expert_contributions(
    const GateTrace& trace) {
    if (trace.empty()) throw ValidationError("expert_contributions: empty trace");
    std::map<std::string, std::array<double, 3>> sums;
    std::map<std::string, long> counts;
    for (const GateRecord& r : trace.records) {
        auto& s = sums[r.task];
        for (int i = 0; i < 3; ++i) s[static_cast<std::size_t>(i)] += r.w[static_cast<std::size_t>(i)];
        ++counts[r.task];
    }
    for (auto& [task, s] : sums)
        for (double& v : s) v /= static_cast<double>(counts[task]);
    return sums;
}

// --- training traces ---------------------------------------------------------

// Stage I emits one row per epoch: epoch,loss,val_loss.
struct EpochRow {
    int epoch = 0;
    double loss = 0.0;
    double val_loss = 0.0;
};

struct LossTrace {
    std::vector<EpochRow> rows;
    bool operator==(const LossTrace& o) const {
        if (rows.size() != o.rows.size()) return false;
        for (std::size_t i = 0; i < rows.size(); ++i)
            if (rows[i].epoch != o.rows[i].epoch || rows[i].loss != o.rows[i].loss ||
                rows[i].val_loss != o.rows[i].val_loss)
                return false;
        return true;
    }
};

inline std::string loss_trace_to_csv(const LossTrace& t) {
    std::string out = "epoch,loss,val_loss\n";
    for (const EpochRow& r : t.rows)
        out += format_int(r.epoch) + "," + format_double(r.loss) + "," +
               format_double(r.val_loss) + "\n";
    return out;
}

// Stage II and the sweep emit step,task,metric,value rows.
struct MetricRow {
    int step = 0;
    std::string task;
    std::string metric;
    double value = 0.0;
};

struct MetricTrace {
    std::vector<MetricRow> rows;

    void add(int step, const std::string& task, const std::string& metric, double value) {
        rows.push_back(MetricRow{step, task, metric, value});
    }

    // last value recorded under (task, metric), or throws
    double last(const std::string& task, const std::string& metric) const {
        for (auto it = rows.rbegin(); it != rows.rend(); ++it)
            if (it->task == task && it->metric == metric) return it->value;
        throw ValidationError("MetricTrace: no rows for " + task + "/" + metric);
    }

    bool operator==(const MetricTrace& o) const {
        if (rows.size() != o.rows.size()) return false;
        for (std::size_t i = 0; i < rows.size(); ++i)
            if (rows[i].step != o.rows[i].step || rows[i].task != o.rows[i].task ||
                rows[i].metric != o.rows[i].metric || rows[i].value != o.rows[i].value)
                return false;
        return true;
    }
};

inline std::string metric_trace_to_csv(const MetricTrace& t) {
    std::string out = "step,task,metric,value\n";
    for (const MetricRow& r : t.rows)
        out += format_int(r.step) + "," + r.task + "," + r.metric + "," +
               format_double(r.value) + "\n";
    return out;
}

}  // namespace geowalk

#endif
