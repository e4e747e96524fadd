#pragma once

#include <Eigen/Dense>

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "semfeat/coldstart.hpp"
#include "semfeat/common.hpp"

namespace semfeat {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Semantic items and datasets
// ---------------------------------------------------------------------------

/// One item: identifier, text payload handed to the oracle, and real-valued
/// covariates. Loaders guarantee covariates start with the constant 1
/// (intercept); programmatic datasets should follow the same convention.
struct SemanticItem {
    std::string id;
    std::string text;
    std::vector<double> covariates;
};

struct Dataset {
    std::vector<SemanticItem> items;
    Eigen::MatrixXd targets;  // T x n_d

    int size() const { return static_cast<int>(items.size()); }
    int target_dim() const { return static_cast<int>(targets.cols()); }
    int covariate_dim() const { return items.empty() ? 0 : static_cast<int>(items.front().covariates.size()); }

    Eigen::MatrixXd covariate_matrix() const {
        Eigen::MatrixXd x(size(), covariate_dim());
        for (int t = 0; t < size(); ++t)
            for (int c = 0; c < covariate_dim(); ++c)
                x(t, c) = items[static_cast<size_t>(t)].covariates[static_cast<size_t>(c)];
        return x;
    }

    void validate() const {
        std::set<std::string> seen;
        size_t ncov = items.empty() ? 0 : items.front().covariates.size();
        for (const auto& it : items) {
            if (it.text.empty()) throw ValidationError("item '" + it.id + "' has empty text");
            if (!seen.insert(it.id).second) throw ValidationError("duplicate item id '" + it.id + "'");
            if (it.covariates.size() != ncov)
                throw ValidationError("item '" + it.id + "' has covariate length " +
                                      std::to_string(it.covariates.size()) + ", expected " +
                                      std::to_string(ncov));
        }
        if (targets.rows() != static_cast<Eigen::Index>(items.size()))
            throw ValidationError("target rows (" + std::to_string(targets.rows()) +
                                  ") do not match item count (" + std::to_string(items.size()) + ")");
        if (!targets.allFinite()) throw ValidationError("targets contain non-finite values");
    }

    Dataset subset(const std::vector<int>& idx) const {
        Dataset d;
        d.targets.resize(static_cast<Eigen::Index>(idx.size()), targets.cols());
        for (size_t k = 0; k < idx.size(); ++k) {
            d.items.push_back(items[static_cast<size_t>(idx[k])]);
            d.targets.row(static_cast<Eigen::Index>(k)) = targets.row(idx[k]);
        }
        return d;
    }
};

enum class DataFormat { items_json, ratings_matrix };

inline DataFormat parse_data_format(const std::string& s) {
    if (s == "items_json") return DataFormat::items_json;
    if (s == "ratings_matrix") return DataFormat::ratings_matrix;
    throw ConfigError("unknown data format '" + s + "'");
}

namespace detail {

/// Remove every member named "price" anywhere in a JSON tree. Prices are
/// withheld from the text payloads the oracle sees.
inline void strip_price_fields(json& j) {
    if (j.is_object()) {
        j.erase("price");
        for (auto& [k, v] : j.items()) strip_price_fields(v);
    } else if (j.is_array()) {
        for (auto& v : j) strip_price_fields(v);
    }
}

inline std::string json_to_text(const json& j) { return j.dump(2); }

inline double require_number(const json& j, const std::string& key, const std::string& ctx) {
    if (!j.contains(key) || !j[key].is_number())
        throw ParseError(ctx + ": missing numeric field '" + key + "'");
    return j[key].get<double>();
}

}  // namespace detail

/// Items file: a JSON array. Two record shapes are accepted:
///   {id, text, covariates?, target?}             (generic)
///   {house_id, metadata{...}, image_descriptions{...}}   (listing records)
/// Listing records become items whose text is the record itself minus any
/// "price" field, with covariates [1, area, bedrooms, bathrooms] and the
/// price as the target. Generic records get a 1 prepended to the declared
/// covariates; a text payload that parses as JSON also has "price" members
/// stripped.
inline Dataset load_items_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open items file: " + path);
    json root;
    try {
        root = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("items file " + path + ": " + e.what());
    }
    if (!root.is_array()) throw ParseError("items file " + path + ": expected a JSON array");

    Dataset d;
    std::vector<std::vector<double>> target_rows;
    int n_with_target = 0;
    for (size_t rec = 0; rec < root.size(); ++rec) {
        const json& r = root[rec];
        std::string ctx = path + " record " + std::to_string(rec);
        if (!r.is_object()) throw ParseError(ctx + ": expected an object");
        SemanticItem item;
        std::vector<double> target;
        if (r.contains("metadata")) {
            const json& md = r["metadata"];
            if (r.contains("house_id"))
                item.id = r["house_id"].is_string() ? r["house_id"].get<std::string>()
                                                    : std::to_string(r["house_id"].get<long>());
            else if (r.contains("id"))
                item.id = r["id"].is_string() ? r["id"].get<std::string>() : r["id"].dump();
            else
                throw ParseError(ctx + ": listing record missing house_id");
            double area = detail::require_number(md, "area", ctx);
            double bedrooms = detail::require_number(md, "bedrooms", ctx);
            double bathrooms = detail::require_number(md, "bathrooms", ctx);
            item.covariates = {1.0, area, bedrooms, bathrooms};
            if (md.contains("price")) target = {detail::require_number(md, "price", ctx)};
            json text_json = r;
            detail::strip_price_fields(text_json);
            item.text = detail::json_to_text(text_json);
        } else {
            if (!r.contains("id")) throw ParseError(ctx + ": missing id");
            item.id = r["id"].is_string() ? r["id"].get<std::string>() : r["id"].dump();
            if (!r.contains("text") || !r["text"].is_string())
                throw ParseError(ctx + ": missing text field");
            item.text = r["text"].get<std::string>();
            json maybe = json::parse(item.text, nullptr, false);
            if (!maybe.is_discarded() && (maybe.is_object() || maybe.is_array())) {
                detail::strip_price_fields(maybe);
                item.text = detail::json_to_text(maybe);
            }
            item.covariates = {1.0};
            if (r.contains("covariates")) {
                if (!r["covariates"].is_array()) throw ParseError(ctx + ": covariates must be an array");
                for (const auto& c : r["covariates"]) {
                    if (!c.is_number()) throw ParseError(ctx + ": non-numeric covariate");
                    item.covariates.push_back(c.get<double>());
                }
            }
            if (r.contains("target")) {
                if (r["target"].is_number()) {
                    target = {r["target"].get<double>()};
                } else if (r["target"].is_array()) {
                    for (const auto& v : r["target"]) {
                        if (!v.is_number()) throw ParseError(ctx + ": non-numeric target entry");
                        target.push_back(v.get<double>());
                    }
                } else {
                    throw ParseError(ctx + ": target must be a number or array");
                }
            }
        }
        if (item.text.empty()) throw ParseError(ctx + ": empty text payload");
        if (!target.empty()) ++n_with_target;
        d.items.push_back(std::move(item));
        target_rows.push_back(std::move(target));
    }
    if (d.items.empty()) throw ParseError("items file " + path + ": no records");

    if (n_with_target == 0) {
        d.targets.resize(static_cast<Eigen::Index>(d.items.size()), 0);
    } else if (n_with_target == static_cast<int>(d.items.size())) {
        size_t nd = target_rows.front().size();
        d.targets.resize(static_cast<Eigen::Index>(d.items.size()), static_cast<Eigen::Index>(nd));
        for (size_t t = 0; t < target_rows.size(); ++t) {
            if (target_rows[t].size() != nd)
                throw ParseError(path + " record " + std::to_string(t) + ": target dimension mismatch");
            for (size_t c = 0; c < nd; ++c)
                d.targets(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c)) = target_rows[t][c];
        }
    } else {
        throw ParseError("items file " + path + ": targets present on some records but not all");
    }
    d.validate();
    return d;
}

/// Sidecar targets: a JSON object {"targets": {id: value-or-array, ...}}.
inline void attach_targets_sidecar(Dataset& d, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open targets file: " + path);
    json root;
    try {
        root = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("targets file " + path + ": " + e.what());
    }
    const json& map = root.contains("targets") ? root["targets"] : root;
    if (!map.is_object()) throw ParseError("targets file " + path + ": expected an object keyed by item id");
    Eigen::Index nd = -1;
    std::vector<std::vector<double>> rows(d.items.size());
    for (size_t t = 0; t < d.items.size(); ++t) {
        const std::string& id = d.items[t].id;
        if (!map.contains(id)) throw ParseError("targets file " + path + ": no entry for item '" + id + "'");
        const json& v = map[id];
        std::vector<double> row;
        if (v.is_number())
            row = {v.get<double>()};
        else if (v.is_array())
            for (const auto& x : v) row.push_back(x.get<double>());
        else
            throw ParseError("targets file " + path + ": entry for '" + id + "' must be number or array");
        if (nd < 0) nd = static_cast<Eigen::Index>(row.size());
        if (static_cast<Eigen::Index>(row.size()) != nd)
            throw ParseError("targets file " + path + ": dimension mismatch for '" + id + "'");
        rows[t] = std::move(row);
    }
    d.targets.resize(static_cast<Eigen::Index>(d.items.size()), nd);
    for (size_t t = 0; t < rows.size(); ++t)
        for (Eigen::Index c = 0; c < nd; ++c) d.targets(static_cast<Eigen::Index>(t), c) = rows[t][static_cast<size_t>(c)];
    d.validate();
}

/// Load under the declared format. A ratings matrix becomes a dataset whose
/// items carry the decimal item index as id and text and whose targets are
/// rank-32 SVD embeddings (alpha = 0.5). Experiments that need other ranks
/// or item pools compose load_ratings / svd_embed directly.
inline Dataset load_dataset(const std::string& path, DataFormat format) {
    if (format == DataFormat::items_json) return load_items_json(path);
    RatingsMatrix rm = load_ratings(path);
    int k = std::min(32, std::min(rm.n_users(), rm.n_items()));
    auto [item_emb, user_emb] = svd_embed(rm, k, 0.5);
    Dataset d;
    d.targets = item_emb.e;
    for (int i = 0; i < rm.n_items(); ++i) {
        SemanticItem it;
        it.id = std::to_string(i);
        it.text = std::to_string(i);
        it.covariates = {1.0};
        d.items.push_back(std::move(it));
    }
    d.validate();
    return d;
}

/// Serialize a validated dataset back to the items_json format. The
/// intercept the loader prepends is dropped so load(serialize(load(x)))
/// is identity.
inline json dataset_to_json(const Dataset& d) {
    json arr = json::array();
    for (int t = 0; t < d.size(); ++t) {
        const auto& it = d.items[static_cast<size_t>(t)];
        json r;
        r["id"] = it.id;
        r["text"] = it.text;
        std::vector<double> cov = it.covariates;
        if (!cov.empty() && cov.front() == 1.0) cov.erase(cov.begin());
        if (!cov.empty()) r["covariates"] = cov;
        if (d.target_dim() == 1)
            r["target"] = d.targets(t, 0);
        else if (d.target_dim() > 1) {
            std::vector<double> row(static_cast<size_t>(d.target_dim()));
            for (int c = 0; c < d.target_dim(); ++c) row[static_cast<size_t>(c)] = d.targets(t, c);
            r["target"] = row;
        }
        arr.push_back(std::move(r));
    }
    return arr;
}

inline void save_dataset(const Dataset& d, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write dataset file: " + path);
    out << dataset_to_json(d).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Transforms and splits
// ---------------------------------------------------------------------------

inline Dataset log_transform_targets(Dataset d) {
    for (int t = 0; t < d.size(); ++t)
        for (int c = 0; c < d.target_dim(); ++c) {
            if (d.targets(t, c) <= 0.0)
                throw ValidationError("log transform: non-positive target for item '" +
                                      d.items[static_cast<size_t>(t)].id + "'");
            d.targets(t, c) = std::log(d.targets(t, c));
        }
    return d;
}

inline Dataset exp_transform_targets(Dataset d) {
    d.targets = d.targets.array().exp();
    return d;
}

struct SplitSpec {
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
};

/// Deterministic uniform split. Train side gets floor(fraction * T) items
/// (an epsilon guards against products like 0.7*10 landing just under the
/// integer), clamped so both sides keep at least one item.
inline std::pair<Dataset, Dataset> split(const Dataset& d, const SplitSpec& spec) {
    if (spec.train_fraction <= 0.0 || spec.train_fraction >= 1.0)
        throw ValidationError("train_fraction must be in (0,1)");
    int t_total = d.size();
    if (t_total < 2) throw ValidationError("split needs at least 2 items");
    int n_train = static_cast<int>(std::floor(spec.train_fraction * t_total + 1e-9));
    n_train = std::clamp(n_train, 1, t_total - 1);
    std::vector<int> idx(static_cast<size_t>(t_total));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = derived_rng(spec.seed, "split");
    deterministic_shuffle(idx, rng);
    std::vector<int> train_idx(idx.begin(), idx.begin() + n_train);
    std::vector<int> test_idx(idx.begin() + n_train, idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    return {d.subset(train_idx), d.subset(test_idx)};
}

/// The 0..n-1 integer-string toy dataset with y = value and intercept-only
/// covariates.
inline Dataset make_integer_toy(int n = 512) {
    Dataset d;
    d.targets.resize(n, 1);
    for (int v = 0; v < n; ++v) {
        SemanticItem it;
        it.id = std::to_string(v);
        it.text = std::to_string(v);
        it.covariates = {1.0};
        d.items.push_back(std::move(it));
        d.targets(v, 0) = static_cast<double>(v);
    }
    return d;
}

}  // namespace semfeat
