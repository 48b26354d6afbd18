#pragma once

// Sliding window of state--input rows feeding the history encoder.

#include <Eigen/Dense>
#include <deque>
#include <stdexcept>

#include "ardl/dynamics.hpp"

namespace ardl {

inline constexpr int kHistoryCols = kStateDim + kInputDim;  // 23

// (h+1) x 23 window, rows ordered oldest first; the last row is (x_k, u_k).
using HistoryMatrix = Eigen::MatrixXd;

inline Eigen::RowVectorXd history_row(const SystemState& x,
                                      const ControlInput& u) {
    Eigen::RowVectorXd row(kHistoryCols);
    row << x.flatten().transpose(), u.flatten().transpose();
    return row;
}

/// Ring of the most recent (x,u) rows. During warm-up, the first row is
/// repeated so a full window is available from the first push.
class HistoryBuffer {
public:
    explicit HistoryBuffer(int history_length) : h_(history_length) {
        if (h_ < 0) throw std::invalid_argument("HistoryBuffer: h must be >= 0");
    }

    void push(const SystemState& x, const ControlInput& u) {
        rows_.push_back(history_row(x, u));
        while (static_cast<int>(rows_.size()) > h_ + 1) rows_.pop_front();
    }

    /// Replaces the input columns of the newest row. Closed-loop control
    /// pushes the state with the previous input before solving, then fixes
    /// the row up once the applied input is known.
    void amend_last_input(const ControlInput& u) {
        if (rows_.empty())
            throw std::logic_error("HistoryBuffer: nothing to amend");
        rows_.back().segment<kInputDim>(kStateDim) = u.flatten().transpose();
    }

    bool empty() const { return rows_.empty(); }
    int history_length() const { return h_; }

    HistoryMatrix window() const {
        if (rows_.empty())
            throw std::logic_error("HistoryBuffer: window requested before any push");
        HistoryMatrix H(h_ + 1, kHistoryCols);
        const int missing = h_ + 1 - static_cast<int>(rows_.size());
        for (int i = 0; i < h_ + 1; ++i) {
            const int src = std::max(0, i - missing);
            H.row(i) = rows_[static_cast<size_t>(src)];
        }
        return H;
    }

private:
    int h_;
    std::deque<Eigen::RowVectorXd> rows_;
};

/// Oldest-first window of the last h+1 rows after pushing (x,u).
inline HistoryMatrix push_history(HistoryBuffer& buffer, const SystemState& x,
                                  const ControlInput& u) {
    buffer.push(x, u);
    return buffer.window();
}

}  // namespace ardl
