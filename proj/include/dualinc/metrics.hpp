#pragma once

#include <optional>
#include <string>
#include <vector>

namespace dualinc::metrics {

// Lower-triangular a[k][j] (1-based k, j <= k): accuracy on task j after
// training through task k. Rows may be absent, e.g. for joint training where
// only the final model exists.
class AccuracyMatrix {
public:
    explicit AccuracyMatrix(std::size_t tasks = 0) : rows_(tasks) {}

    std::size_t tasks() const noexcept { return rows_.size(); }
    void set_row(std::size_t k, std::vector<double> row);
    bool has_row(std::size_t k) const;
    const std::vector<double>& row(std::size_t k) const;
    double at(std::size_t k, std::size_t j) const;
    // Highest k with a row, 0 if none.
    std::size_t last_row() const;

    std::string to_json() const;
    static AccuracyMatrix from_json(const std::string& text);

    bool operator==(const AccuracyMatrix&) const = default;

private:
    std::vector<std::optional<std::vector<double>>> rows_;
};

// AA_k: mean of row k.
double average_accuracy(const AccuracyMatrix& m, std::size_t k);
// f_j^k: best earlier accuracy on task j minus the accuracy after task k.
double forgetting(const AccuracyMatrix& m, std::size_t j, std::size_t k);
// AF_k: mean of f_j^k over j < k. Undefined (ContractError) for k < 2.
double average_forgetting(const AccuracyMatrix& m, std::size_t k);

}  // namespace dualinc::metrics
