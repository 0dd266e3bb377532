#include "dualinc/metrics.hpp"

#include "dualinc/errors.hpp"

#include <json.hpp>

#include <algorithm>

namespace dualinc::metrics {

using nlohmann::json;

namespace {
void check_k(std::size_t k, std::size_t tasks) {
    if (k == 0 || k > tasks) {
        throw IndexError("accuracy matrix: row " + std::to_string(k) + " outside 1.." +
                         std::to_string(tasks));
    }
}
}  // namespace

void AccuracyMatrix::set_row(std::size_t k, std::vector<double> row) {
    check_k(k, tasks());
    if (row.size() != k) {
        throw DimensionError("accuracy matrix: row " + std::to_string(k) + " needs " +
                             std::to_string(k) + " entries, got " + std::to_string(row.size()));
    }
    for (double a : row) {
        if (!(a >= 0.0 && a <= 1.0)) throw ContractError("accuracy matrix: entry outside [0, 1]");
    }
    rows_[k - 1] = std::move(row);
}

bool AccuracyMatrix::has_row(std::size_t k) const {
    check_k(k, tasks());
    return rows_[k - 1].has_value();
}

const std::vector<double>& AccuracyMatrix::row(std::size_t k) const {
    if (!has_row(k)) throw ContractError("accuracy matrix: row " + std::to_string(k) + " missing");
    return *rows_[k - 1];
}

double AccuracyMatrix::at(std::size_t k, std::size_t j) const {
    const auto& r = row(k);
    if (j == 0 || j > k) throw IndexError("accuracy matrix: column outside 1..k");
    return r[j - 1];
}

std::size_t AccuracyMatrix::last_row() const {
    for (std::size_t k = tasks(); k > 0; --k) {
        if (rows_[k - 1]) return k;
    }
    return 0;
}

std::string AccuracyMatrix::to_json() const {
    json j;
    j["tasks"] = tasks();
    j["rows"] = json::array();
    for (const auto& r : rows_) j["rows"].push_back(r ? json(*r) : json(nullptr));
    return j.dump();
}

AccuracyMatrix AccuracyMatrix::from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        AccuracyMatrix m(j.at("tasks").get<std::size_t>());
        const auto& rows = j.at("rows");
        if (rows.size() != m.tasks()) throw DataError("accuracy matrix: row count mismatch");
        for (std::size_t k = 1; k <= m.tasks(); ++k) {
            if (!rows[k - 1].is_null()) m.set_row(k, rows[k - 1].get<std::vector<double>>());
        }
        return m;
    } catch (const json::exception& e) {
        throw DataError(std::string("accuracy matrix: ") + e.what());
    }
}

double average_accuracy(const AccuracyMatrix& m, std::size_t k) {
    const auto& r = m.row(k);
    double s = 0.0;
    for (double a : r) s += a;
    return s / static_cast<double>(k);
}

double forgetting(const AccuracyMatrix& m, std::size_t j, std::size_t k) {
    if (j == 0 || j >= k) throw ContractError("forgetting: requires 1 <= j < k");
    double best = m.at(j, j);
    for (std::size_t l = j + 1; l < k; ++l) best = std::max(best, m.at(l, j));
    return best - m.at(k, j);
}

double average_forgetting(const AccuracyMatrix& m, std::size_t k) {
    if (k < 2) throw ContractError("average_forgetting: undefined for fewer than two tasks");
    double s = 0.0;
    for (std::size_t j = 1; j < k; ++j) s += forgetting(m, j, k);
    return s / static_cast<double>(k - 1);
}

}  // namespace dualinc::metrics
