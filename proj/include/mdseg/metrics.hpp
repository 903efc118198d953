#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "tensor.hpp"

namespace mdseg {

struct MetricsReport {
    int classes = 0;
    std::vector<std::uint64_t> confusion;  ///< classes x classes, row = truth, column = prediction
    std::vector<std::uint64_t> support;    ///< ground-truth pixels per class
    std::vector<Scalar> per_class;         ///< recall per class; NaN for classes without pixels
    Scalar class_average = 0;              ///< mean of per_class over classes with support
    Scalar pixel_accuracy = 0;

    std::uint64_t count(int truth, int pred) const {
        return confusion[static_cast<std::size_t>(truth) * classes + pred];
    }
};

/// Accumulates a confusion matrix over several prediction/truth pairs.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int classes) : classes_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {
        if (classes < 1 || classes > 255) throw ArgumentError("class count must be in 1..255");
    }

    /// Pixels whose truth is the ignore label are skipped.
    void add(const LabelMap& pred, const LabelMap& truth) {
        if (pred.batch != truth.batch || pred.height != truth.height || pred.width != truth.width)
            throw ShapeError("prediction and truth label maps differ in shape");
        for (std::size_t i = 0; i < truth.size(); ++i) {
            const int t = truth.data[i];
            if (t == LabelMap::kIgnore) continue;
            const int p = pred.data[i];
            if (t >= classes_) throw ArgumentError("truth label " + std::to_string(t) + " out of range");
            if (p >= classes_) throw ArgumentError("predicted label " + std::to_string(p) + " out of range");
            ++counts_[static_cast<std::size_t>(t) * classes_ + p];
        }
    }

    MetricsReport report() const {
        MetricsReport r;
        r.classes = classes_;
        r.confusion = counts_;
        r.support.assign(static_cast<std::size_t>(classes_), 0);
        r.per_class.assign(static_cast<std::size_t>(classes_), std::numeric_limits<Scalar>::quiet_NaN());
        std::uint64_t correct = 0, total = 0;
        Scalar sum = 0;
        int present = 0;
        for (int t = 0; t < classes_; ++t) {
            std::uint64_t row = 0;
            for (int p = 0; p < classes_; ++p) row += r.count(t, p);
            r.support[static_cast<std::size_t>(t)] = row;
            correct += r.count(t, t);
            total += row;
            if (row == 0) continue;
            const Scalar acc = static_cast<Scalar>(r.count(t, t)) / static_cast<Scalar>(row);
            r.per_class[static_cast<std::size_t>(t)] = acc;
            sum += acc;
            ++present;
        }
        r.class_average = present ? sum / present : 0;
        r.pixel_accuracy = total ? static_cast<Scalar>(correct) / static_cast<Scalar>(total) : 0;
        return r;
    }

private:
    int classes_;
    std::vector<std::uint64_t> counts_;
};

inline MetricsReport evaluate_metrics(const LabelMap& pred, const LabelMap& truth, int classes) {
    ConfusionMatrix m(classes);
    m.add(pred, truth);
    return m.report();
}

} // namespace mdseg
