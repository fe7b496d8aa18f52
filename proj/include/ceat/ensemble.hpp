#pragma once

// Averaged-softmax ensembles, the peer-correctness partition of a batch,
// and 0-1 risk diagnostics built on it.

#include <cstdint>
#include <span>
#include <vector>

#include "ceat/errors.hpp"
#include "ceat/model.hpp"
#include "ceat/tensor.hpp"

namespace ceat {

struct Ensemble {
    std::vector<Model> members;
    std::vector<SgdState> optimizers;

    std::size_t size() const noexcept { return members.size(); }
    const Shape& input_shape() const { return members.at(0).input_shape(); }
    std::size_t num_classes() const { return members.at(0).num_classes(); }

    void validate() const {
        if (members.empty()) throw UsageError("ensemble has no members");
        for (const auto& m : members)
            if (m.input_shape() != input_shape() || m.num_classes() != num_classes())
                throw DimensionError("ensemble members disagree on input shape or class count");
        if (!optimizers.empty() && optimizers.size() != members.size())
            throw UsageError("ensemble needs one optimizer per member");
    }
};

// Seed of member m derived from a run seed; distinct for distinct (seed, m).
inline std::uint64_t member_seed(std::uint64_t seed, std::size_t m) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (m + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline Ensemble make_ensemble(const ArchSpec& arch, const Shape& input_shape, std::size_t num_classes,
                              std::size_t members, std::uint64_t seed, double learning_rate = 0.01,
                              double momentum = 0.9, std::vector<Milestone> schedule = {}) {
    Ensemble e;
    for (std::size_t m = 0; m < members; ++m) {
        e.members.push_back(init_model(arch, input_shape, num_classes, member_seed(seed, m)));
        e.optimizers.push_back(make_sgd(e.members.back(), learning_rate, momentum, schedule));
    }
    e.validate();
    return e;
}

// Row-wise argmax, ties to the lowest class index.
inline std::vector<int> argmax_rows(const Tensor& scores) {
    const std::size_t n = scores.dim(0), k = scores.dim(1);
    std::vector<int> out(n);
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (scores[r * k + c] > scores[r * k + best]) best = c;
        out[r] = static_cast<int>(best);
    }
    return out;
}

inline std::vector<int> predict(const Model& model, const Tensor& x) { return argmax_rows(forward(model, x)); }

inline Tensor member_probs(const Model& model, const Tensor& x) { return softmax_rows(forward(model, x)); }

// Arithmetic mean of member softmax outputs. Accumulated as a running mean
// so that identical members reproduce the member output exactly.
inline Tensor ensemble_probs(std::span<const Model* const> members, const Tensor& x) {
    if (members.empty()) throw UsageError("ensemble has no members");
    Tensor mean = member_probs(*members[0], x);
    for (std::size_t m = 1; m < members.size(); ++m) {
        const Tensor p = member_probs(*members[m], x);
        const double count = static_cast<double>(m + 1);
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += (p[i] - mean[i]) / count;
    }
    return mean;
}

inline std::vector<const Model*> member_pointers(const Ensemble& e) {
    std::vector<const Model*> out;
    for (const auto& m : e.members) out.push_back(&m);
    return out;
}

inline Tensor ensemble_probs(const Ensemble& e, const Tensor& x) {
    e.validate();
    return ensemble_probs(member_pointers(e), x);
}

inline std::vector<int> ensemble_predict(const Ensemble& e, const Tensor& x) {
    return argmax_rows(ensemble_probs(e, x));
}

struct CorrectSplit {
    std::vector<std::size_t> correct;    // S+
    std::vector<std::size_t> incorrect;  // S-
};

inline CorrectSplit split_correct(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) throw DimensionError("split_correct: size mismatch");
    CorrectSplit s;
    for (std::size_t i = 0; i < labels.size(); ++i)
        (predictions[i] == labels[i] ? s.correct : s.incorrect).push_back(i);
    return s;
}

inline CorrectSplit split_correct(const Model& model, const Tensor& x, std::span<const int> labels) {
    return split_correct(predict(model, x), labels);
}

// Four-way split of a batch by the correctness of two peers i and j:
// f1 = i right, j wrong; f2 = i wrong, j right; f3 = both right; f4 = both wrong.
struct FilterPartition {
    std::vector<std::size_t> f1, f2, f3, f4;

    std::size_t total() const noexcept { return f1.size() + f2.size() + f3.size() + f4.size(); }
    std::size_t disagree() const noexcept { return f1.size() + f2.size(); }
    std::size_t agree() const noexcept { return f3.size() + f4.size(); }
};

// Generalizes to any number of peers: f3 = all peers right, f4 = all wrong,
// and mixed samples go to f1 when the first peer is right, f2 otherwise.
// With exactly two peers this is the pairwise definition above.
inline FilterPartition partition_by_correctness(const std::vector<std::vector<bool>>& peer_correct) {
    if (peer_correct.empty()) throw UsageError("filter partition needs at least one peer");
    const std::size_t n = peer_correct.front().size();
    for (const auto& c : peer_correct)
        if (c.size() != n) throw DimensionError("filter partition: peers disagree on batch size");
    FilterPartition part;
    for (std::size_t s = 0; s < n; ++s) {
        std::size_t right = 0;
        for (const auto& c : peer_correct) right += c[s] ? 1 : 0;
        if (right == peer_correct.size())
            part.f3.push_back(s);
        else if (right == 0)
            part.f4.push_back(s);
        else if (peer_correct.front()[s])
            part.f1.push_back(s);
        else
            part.f2.push_back(s);
    }
    return part;
}

inline std::vector<bool> correctness(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) throw DimensionError("correctness: size mismatch");
    std::vector<bool> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = predictions[i] == labels[i];
    return out;
}

inline FilterPartition filter_partition(const Model& peer_i, const Model& peer_j, const Tensor& x_tilde,
                                        std::span<const int> labels) {
    return partition_by_correctness(
        {correctness(predict(peer_i, x_tilde), labels), correctness(predict(peer_j, x_tilde), labels)});
}

// Partition used when training member m: its peers are every other member.
inline FilterPartition peer_partition(const std::vector<std::vector<int>>& member_predictions, std::size_t m,
                                      std::span<const int> labels) {
    std::vector<std::vector<bool>> peers;
    for (std::size_t i = 0; i < member_predictions.size(); ++i)
        if (i != m) peers.push_back(correctness(member_predictions[i], labels));
    return partition_by_correctness(peers);
}

struct MemberRisk {
    double risk = 0.0;           // fraction of samples the member misclassifies
    double boundary_mass = 0.0;  // |F1 ∪ F2| / N over its peers
    double interior_mass = 0.0;  // |F3 ∪ F4| / N
    double boundary_risk = 0.0;  // member errors inside F1 ∪ F2, / N
    double interior_risk = 0.0;  // member errors inside F3 ∪ F4, / N
    double combined = 0.0;       // boundary_risk + interior_risk
};

struct RiskReport {
    std::vector<MemberRisk> members;
    double ensemble_risk = 0.0;  // averaged-softmax prediction wrong
    double majority_risk = 0.0;  // more than half of the members wrong
};

// 0-1 risk diagnostics on an already-perturbed batch. The figures are
// relative to whatever attack produced x_tilde.
inline RiskReport adversarial_risk(const std::vector<std::vector<int>>& member_predictions,
                                   std::span<const int> ensemble_predictions, std::span<const int> labels) {
    const std::size_t n = labels.size();
    const std::size_t m_count = member_predictions.size();
    RiskReport report;
    if (n == 0) return report;
    const double nd = static_cast<double>(n);
    for (std::size_t m = 0; m < m_count; ++m) {
        const auto own = correctness(member_predictions[m], labels);
        MemberRisk r;
        for (bool ok : own) r.risk += ok ? 0.0 : 1.0;
        r.risk /= nd;
        if (m_count > 1) {
            const auto part = peer_partition(member_predictions, m, labels);
            r.boundary_mass = static_cast<double>(part.disagree()) / nd;
            r.interior_mass = static_cast<double>(part.agree()) / nd;
            for (const auto* set : {&part.f1, &part.f2})
                for (auto s : *set) r.boundary_risk += own[s] ? 0.0 : 1.0;
            for (const auto* set : {&part.f3, &part.f4})
                for (auto s : *set) r.interior_risk += own[s] ? 0.0 : 1.0;
            r.boundary_risk /= nd;
            r.interior_risk /= nd;
        } else {
            r.interior_mass = 1.0;
            r.interior_risk = r.risk;
        }
        r.combined = r.boundary_risk + r.interior_risk;
        report.members.push_back(r);
    }
    for (std::size_t s = 0; s < n; ++s) {
        report.ensemble_risk += ensemble_predictions[s] == labels[s] ? 0.0 : 1.0;
        std::size_t wrong = 0;
        for (const auto& p : member_predictions) wrong += p[s] == labels[s] ? 0 : 1;
        report.majority_risk += 2 * wrong > m_count ? 1.0 : 0.0;
    }
    report.ensemble_risk /= nd;
    report.majority_risk /= nd;
    return report;
}

inline RiskReport adversarial_risk(const Ensemble& e, const Tensor& x_tilde, std::span<const int> labels) {
    std::vector<std::vector<int>> preds;
    for (const auto& m : e.members) preds.push_back(predict(m, x_tilde));
    const auto ens = ensemble_predict(e, x_tilde);
    return adversarial_risk(preds, ens, labels);
}

}  // namespace ceat
