#include "pspde/model.hpp"

#include "pspde/error.hpp"
#include "pspde/kernels.hpp"

namespace pspde {

Dataset Dataset::on_grid(GridAxes axes, Eigen::VectorXd zeta) {
    Dataset d;
    d.points = grid_points(axes);
    d.grid = std::move(axes);
    d.zeta = std::move(zeta);
    return d;
}

namespace {

DesignMatrix build_design(const TensorBasis& basis, const Dataset& data) {
    const std::vector<int> zero(static_cast<std::size_t>(basis.dimension()), 0);
    if (data.grid) return tensor_design(basis, *data.grid, zero);
    return tensor_design(basis, data.points, zero);
}

}  // namespace

SmoothingProblem::SmoothingProblem(TensorBasis basis, PdeSpec pde, const Dataset& data,
                                   std::optional<ConstraintSet> constraints, QuadratureRule rule) {
    if (data.points.rows() != data.zeta.size())
        throw ValidationError("dataset has " + std::to_string(data.points.rows()) + " points but " +
                              std::to_string(data.zeta.size()) + " responses");
    if (data.zeta.size() == 0) throw ValidationError("dataset is empty");
    if (!data.zeta.allFinite()) throw ValidationError("dataset contains non-finite responses");
    auto order = CoefficientOrder::for_basis(basis);
    DesignMatrix design = build_design(basis, data);
    BandMatrix BtB = kernels::crossprod_band(design.B, order);
    BandMatrix HtH;
    Eigen::VectorXd Htv;
    Eigen::MatrixXd Ht;
    if (constraints) {
        if (constraints->H.cols() != basis.size()) throw ValidationError("condition matrix does not match the basis");
        if (constraints->empty()) {
            constraints.reset();
        } else {
            HtH = kernels::crossprod_band(constraints->H, order);
            Htv = order.to_internal(constraints->H.transpose() * constraints->v);
            Ht.resize(basis.size(), constraints->rows());
            const Eigen::MatrixXd Hd(constraints->H);
            for (int c = 0; c < basis.size(); ++c) Ht.row(order.internal(c)) = Hd.col(c).transpose();
        }
    }
    core_ = std::make_shared<const Core>(Core{PenaltyAssembler(std::move(pde), std::move(basis), rule, order),
                                              data.points, std::move(design), std::move(BtB),
                                              std::move(constraints), std::move(HtH), std::move(Htv),
                                              std::move(Ht)});
    set_response(data.zeta);
}

SmoothingProblem SmoothingProblem::with_response(const Eigen::VectorXd& zeta) const {
    if (zeta.size() != zeta_.size()) throw ValidationError("replacement response has the wrong length");
    SmoothingProblem out = *this;
    out.set_response(zeta);
    return out;
}

void SmoothingProblem::set_response(const Eigen::VectorXd& zeta) {
    zeta_ = zeta;
    Btz_ = order().to_internal(core_->design.B.transpose() * zeta);
    ztz_ = zeta.squaredNorm();
}

const ConstraintSet& SmoothingProblem::constraints() const {
    if (!core_->constraints) throw ValidationError("problem has no conditions");
    return *core_->constraints;
}

const BandMatrix& SmoothingProblem::HtH() const {
    static_cast<void>(constraints());
    return core_->HtH;
}

const Eigen::VectorXd& SmoothingProblem::Htv() const {
    static_cast<void>(constraints());
    return core_->Htv;
}

const Eigen::MatrixXd& SmoothingProblem::Ht() const {
    static_cast<void>(constraints());
    return core_->Ht;
}

Eigen::VectorXd SmoothingProblem::fitted(const Eigen::VectorXd& c_internal) const {
    return core_->design.B * order().to_canonical(c_internal);
}

double SmoothingProblem::rss(const Eigen::VectorXd& c_internal) const {
    return (zeta_ - fitted(c_internal)).squaredNorm();
}

}  // namespace pspde
