#pragma once

// Tape-based reverse-mode differentiation over Eigen matrices. Nodes are
// created in topological order, so the backward sweep is a reverse walk of
// the tape. Matrix-valued ops keep graphs small enough to rebuild per sample.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

namespace ardl::ad {

using Eigen::MatrixXd;

struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

class Tape {
public:
    Var leaf(MatrixXd value) {
        nodes_.push_back(Node{std::move(value), MatrixXd(), nullptr});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const MatrixXd& value(Var v) const { return nodes_[check(v)].value; }
    const MatrixXd& grad(Var v) const { return nodes_[check(v)].grad; }

    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a 1x1 node, seeding its gradient with `seed`.
    void backward(Var loss, double seed = 1.0) {
        Node& ln = nodes_[check(loss)];
        if (ln.value.size() != 1)
            throw std::invalid_argument("backward: loss node must be 1x1");
        for (auto& n : nodes_) n.grad.setZero(n.value.rows(), n.value.cols());
        ln.grad(0, 0) = seed;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i)
            if (nodes_[i].backward) nodes_[i].backward(*this, nodes_[i].grad);
    }

    // -- ops ---------------------------------------------------------------

    Var matmul(Var a, Var b) {
        MatrixXd v = value(a) * value(b);
        return make(std::move(v), [a, b](Tape& t, const MatrixXd& g) {
            t.nodes_[a.idx].grad.noalias() += g * t.value(b).transpose();
            t.nodes_[b.idx].grad.noalias() += t.value(a).transpose() * g;
        });
    }

    Var add(Var a, Var b) {
        MatrixXd v = value(a) + value(b);
        return make(std::move(v), [a, b](Tape& t, const MatrixXd& g) {
            t.nodes_[a.idx].grad += g;
            t.nodes_[b.idx].grad += g;
        });
    }

    Var sub(Var a, Var b) {
        MatrixXd v = value(a) - value(b);
        return make(std::move(v), [a, b](Tape& t, const MatrixXd& g) {
            t.nodes_[a.idx].grad += g;
            t.nodes_[b.idx].grad -= g;
        });
    }

    Var scale(Var a, double s) {
        MatrixXd v = s * value(a);
        return make(std::move(v), [a, s](Tape& t, const MatrixXd& g) {
            t.nodes_[a.idx].grad += s * g;
        });
    }

    Var cmul(Var a, Var b) {
        MatrixXd v = value(a).cwiseProduct(value(b));
        return make(std::move(v), [a, b](Tape& t, const MatrixXd& g) {
            t.nodes_[a.idx].grad += g.cwiseProduct(t.value(b));
            t.nodes_[b.idx].grad += g.cwiseProduct(t.value(a));
        });
    }

    /// Broadcast-add a 1xN row vector to every row of a.
    Var add_rowvec(Var a, Var row) {
        if (value(row).rows() != 1 || value(row).cols() != value(a).cols())
            throw std::invalid_argument("add_rowvec: shape mismatch");
        MatrixXd v = value(a).rowwise() + value(row).row(0);
        return make(std::move(v), [a, row](Tape& t, const MatrixXd& g) {
            t.nodes_[a.idx].grad += g;
            t.nodes_[row.idx].grad += g.colwise().sum();
        });
    }

    /// Broadcast-add a 1x1 scalar node to every entry of a.
    Var add_scalar(Var a, Var s) {
        if (value(s).size() != 1)
            throw std::invalid_argument("add_scalar: scalar node must be 1x1");
        MatrixXd v = value(a).array() + value(s)(0, 0);
        return make(std::move(v), [a, s](Tape& t, const MatrixXd& g) {
            t.nodes_[a.idx].grad += g;
            t.nodes_[s.idx].grad(0, 0) += g.sum();
        });
    }

    Var transpose(Var a) {
        MatrixXd v = value(a).transpose();
        return make(std::move(v), [a](Tape& t, const MatrixXd& g) {
            t.nodes_[a.idx].grad += g.transpose();
        });
    }

    Var rows(Var a, int start, int count) {
        MatrixXd v = value(a).middleRows(start, count);
        return make(std::move(v), [a, start, count](Tape& t, const MatrixXd& g) {
            t.nodes_[a.idx].grad.middleRows(start, count) += g;
        });
    }

    Var vstack(const std::vector<Var>& parts) {
        Eigen::Index total = 0;
        const Eigen::Index cols = value(parts.at(0)).cols();
        for (Var p : parts) total += value(p).rows();
        MatrixXd v(total, cols);
        Eigen::Index at = 0;
        for (Var p : parts) {
            v.middleRows(at, value(p).rows()) = value(p);
            at += value(p).rows();
        }
        return make(std::move(v), [parts](Tape& t, const MatrixXd& g) {
            Eigen::Index at = 0;
            for (Var p : parts) {
                const Eigen::Index r = t.value(p).rows();
                t.nodes_[p.idx].grad += g.middleRows(at, r);
                at += r;
            }
        });
    }

    /// Output row i is input row perm[i]; perm must be a permutation.
    Var permute_rows(Var a, std::vector<int> perm) {
        const MatrixXd& x = value(a);
        if (static_cast<Eigen::Index>(perm.size()) != x.rows())
            throw std::invalid_argument("permute_rows: size mismatch");
        MatrixXd v(x.rows(), x.cols());
        for (size_t i = 0; i < perm.size(); ++i) v.row(i) = x.row(perm[i]);
        return make(std::move(v),
                    [a, perm = std::move(perm)](Tape& t, const MatrixXd& g) {
                        MatrixXd& ga = t.nodes_[a.idx].grad;
                        for (size_t i = 0; i < perm.size(); ++i)
                            ga.row(perm[i]) += g.row(i);
                    });
    }

    /// Row-wise softmax with max-shift stabilization.
    Var softmax_rows(Var a) {
        const MatrixXd& x = value(a);
        MatrixXd v(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            const double m = x.row(r).maxCoeff();
            Eigen::ArrayXd e = (x.row(r).array() - m).exp();
            v.row(r) = (e / e.sum()).matrix();
        }
        MatrixXd y = v;
        return make(std::move(v),
                    [a, y = std::move(y)](Tape& t, const MatrixXd& g) {
                        MatrixXd& ga = t.nodes_[a.idx].grad;
                        for (Eigen::Index r = 0; r < y.rows(); ++r) {
                            const double dot = g.row(r).dot(y.row(r));
                            ga.row(r) += (y.row(r).array() *
                                          (g.row(r).array() - dot))
                                             .matrix();
                        }
                    });
    }

    /// Softmax over all coefficients jointly.
    Var softmax_all(Var a) {
        const MatrixXd& x = value(a);
        const double m = x.maxCoeff();
        MatrixXd e = (x.array() - m).exp().matrix();
        MatrixXd v = e / e.sum();
        MatrixXd y = v;
        return make(std::move(v),
                    [a, y = std::move(y)](Tape& t, const MatrixXd& g) {
                        const double dot = (g.array() * y.array()).sum();
                        t.nodes_[a.idx].grad +=
                            (y.array() * (g.array() - dot)).matrix();
                    });
    }

    /// Per-row normalization over the feature dimension with learned
    /// 1xN gain and bias.
    Var layer_norm_rows(Var a, Var gain, Var bias, double eps = 1e-8) {
        const MatrixXd& x = value(a);
        const Eigen::Index n = x.cols();
        MatrixXd xhat(x.rows(), n);
        Eigen::ArrayXd inv_sigma(x.rows());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            const double mu = x.row(r).mean();
            const double var = (x.row(r).array() - mu).square().mean();
            inv_sigma(r) = 1.0 / std::sqrt(var + eps);
            xhat.row(r) = ((x.row(r).array() - mu) * inv_sigma(r)).matrix();
        }
        MatrixXd v =
            (xhat.array().rowwise() * value(gain).row(0).array()).rowwise() +
            value(bias).row(0).array();
        return make(
            std::move(v),
            [a, gain, bias, xhat = std::move(xhat),
             inv_sigma = std::move(inv_sigma)](Tape& t, const MatrixXd& g) {
                MatrixXd& ga = t.nodes_[a.idx].grad;
                t.nodes_[gain.idx].grad +=
                    (g.array() * xhat.array()).colwise().sum().matrix();
                t.nodes_[bias.idx].grad += g.colwise().sum();
                const auto gr = t.value(gain).row(0).array();
                for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    const Eigen::ArrayXd dxhat = g.row(r).array() * gr;
                    const double mean_dx = dxhat.mean();
                    const double mean_dx_xhat =
                        (dxhat * xhat.row(r).transpose().array()).mean();
                    ga.row(r) +=
                        (inv_sigma(r) *
                         (dxhat - mean_dx -
                          xhat.row(r).transpose().array() * mean_dx_xhat))
                            .matrix()
                            .transpose();
                }
            });
    }

    Var elu(Var a) {
        const MatrixXd& x = value(a);
        MatrixXd v = x.unaryExpr(
            [](double t) { return t > 0.0 ? t : std::expm1(t); });
        return make(std::move(v), [a](Tape& t, const MatrixXd& g) {
            const MatrixXd& x = t.value(a);
            t.nodes_[a.idx].grad += g.cwiseProduct(x.unaryExpr(
                [](double s) { return s > 0.0 ? 1.0 : std::exp(s); }));
        });
    }

    Var sum_all(Var a) {
        MatrixXd v(1, 1);
        v(0, 0) = value(a).sum();
        return make(std::move(v), [a](Tape& t, const MatrixXd& g) {
            t.nodes_[a.idx].grad.array() += g(0, 0);
        });
    }

    Var squared_norm(Var a) {
        MatrixXd v(1, 1);
        v(0, 0) = value(a).squaredNorm();
        return make(std::move(v), [a](Tape& t, const MatrixXd& g) {
            t.nodes_[a.idx].grad += 2.0 * g(0, 0) * t.value(a);
        });
    }

private:
    struct Node {
        MatrixXd value;
        MatrixXd grad;
        std::function<void(Tape&, const MatrixXd&)> backward;
    };

    int next_index() const { return static_cast<int>(nodes_.size()); }

    Var make(MatrixXd value,
             std::function<void(Tape&, const MatrixXd&)> back) {
        nodes_.push_back(Node{std::move(value), MatrixXd(), std::move(back)});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    int check(Var v) const {
        if (!v.valid() || v.idx >= static_cast<int>(nodes_.size()))
            throw std::out_of_range("Tape: invalid Var");
        return v.idx;
    }

    std::vector<Node> nodes_;
};

}  // namespace ardl::ad
