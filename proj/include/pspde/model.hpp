#pragma once

#include <memory>
#include <optional>

#include <Eigen/Dense>

#include "pspde/basis.hpp"
#include "pspde/linalg.hpp"
#include "pspde/pde.hpp"

namespace pspde {

/// Observations zeta at points (N x p). When `grid` is set the points are its
/// outer product and the design is built in grid mode.
struct Dataset {
    Eigen::MatrixXd points;
    Eigen::VectorXd zeta;
    std::optional<GridAxes> grid;

    static Dataset on_grid(GridAxes axes, Eigen::VectorXd zeta);
    [[nodiscard]] Eigen::Index size() const noexcept { return zeta.size(); }
};

/// Everything an estimator needs about one smoothing problem, precomputed:
/// design, B^T B, the penalty block cache and condition cross-products. All
/// band quantities use the internal coefficient order. Copies share the
/// immutable part, so replacing the response is cheap.
class SmoothingProblem {
public:
    SmoothingProblem(TensorBasis basis, PdeSpec pde, const Dataset& data,
                     std::optional<ConstraintSet> constraints = std::nullopt, QuadratureRule rule = {});

    [[nodiscard]] SmoothingProblem with_response(const Eigen::VectorXd& zeta) const;

    [[nodiscard]] const TensorBasis& basis() const noexcept { return core_->assembler.basis(); }
    [[nodiscard]] const PdeSpec& pde() const noexcept { return core_->assembler.pde(); }
    [[nodiscard]] const CoefficientOrder& order() const noexcept { return core_->assembler.order(); }
    [[nodiscard]] const PenaltyAssembler& penalty() const noexcept { return core_->assembler; }
    [[nodiscard]] const DesignMatrix& design() const noexcept { return core_->design; }
    [[nodiscard]] const BandMatrix& BtB() const noexcept { return core_->BtB; }
    [[nodiscard]] const Eigen::MatrixXd& points() const noexcept { return core_->points; }

    [[nodiscard]] bool has_constraints() const noexcept { return core_->constraints.has_value(); }
    [[nodiscard]] const ConstraintSet& constraints() const;
    [[nodiscard]] const BandMatrix& HtH() const;
    [[nodiscard]] const Eigen::VectorXd& Htv() const;
    /// H^T as n x K, internal row order.
    [[nodiscard]] const Eigen::MatrixXd& Ht() const;

    [[nodiscard]] const Eigen::VectorXd& zeta() const noexcept { return zeta_; }
    [[nodiscard]] const Eigen::VectorXd& Btz() const noexcept { return Btz_; }
    [[nodiscard]] double ztz() const noexcept { return ztz_; }
    [[nodiscard]] int n_obs() const noexcept { return static_cast<int>(zeta_.size()); }
    [[nodiscard]] int n_coef() const noexcept { return order().size(); }

    /// B c for internal-order c.
    [[nodiscard]] Eigen::VectorXd fitted(const Eigen::VectorXd& c_internal) const;
    [[nodiscard]] double rss(const Eigen::VectorXd& c_internal) const;

private:
    struct Core {
        PenaltyAssembler assembler;
        Eigen::MatrixXd points;
        DesignMatrix design;
        BandMatrix BtB;
        std::optional<ConstraintSet> constraints;
        BandMatrix HtH;
        Eigen::VectorXd Htv;
        Eigen::MatrixXd Ht;
    };
    std::shared_ptr<const Core> core_;
    Eigen::VectorXd zeta_;
    Eigen::VectorXd Btz_;
    double ztz_ = 0.0;

    void set_response(const Eigen::VectorXd& zeta);
};

}  // namespace pspde
