#pragma once

#include <cctype>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "semfeat/common.hpp"
#include "semfeat/corpus.hpp"
#include "semfeat/prompts.hpp"

namespace semfeat {

// ---------------------------------------------------------------------------
// Feature descriptors and judgments
// ---------------------------------------------------------------------------

/// A natural-language yes/no characteristic. The text is the parameter: the
/// oracle decides per item whether it applies.
struct FeatureDescriptor {
    std::string text;

    bool operator==(const FeatureDescriptor& o) const { return text == o.text; }
};

struct MiningRequest {
    std::vector<SemanticItem> positives;
    std::vector<SemanticItem> negatives;

    void validate() const {
        if (positives.empty() || negatives.empty())
            throw ValidationError("mining request needs non-empty positive and negative groups");
        std::set<std::string> pos_ids;
        for (const auto& s : positives) pos_ids.insert(s.id);
        for (const auto& s : negatives)
            if (pos_ids.count(s.id))
                throw ValidationError("mining request groups overlap on item '" + s.id + "'");
    }
};

// ---------------------------------------------------------------------------
// Oracle interface
// ---------------------------------------------------------------------------

class Oracle {
public:
    virtual ~Oracle() = default;

    /// h(s, theta_f) in {0,1}.
    virtual int extract(const SemanticItem& item, const FeatureDescriptor& descriptor) = 0;

    /// Judgments aligned with items. Default loops extract; backends with a
    /// batched protocol override.
    virtual std::vector<int> extract_batch(const std::vector<SemanticItem>& items,
                                           const FeatureDescriptor& descriptor) {
        if (items.empty()) throw ValidationError("extract_batch on empty item list");
        std::vector<int> out;
        out.reserve(items.size());
        for (const auto& it : items) out.push_back(extract(it, descriptor));
        return out;
    }

    /// A descriptor intended to hold on the positives and fail on the
    /// negatives.
    virtual FeatureDescriptor mine(const MiningRequest& req) = 0;

    /// Around n task-motivated descriptors; deduplicated, count may differ.
    virtual std::vector<FeatureDescriptor> propose_zero_shot(const std::vector<SemanticItem>& items,
                                                             const std::string& task_description,
                                                             int n) = 0;

    virtual std::string name() const = 0;
};

// ---------------------------------------------------------------------------
// Synthetic integer oracle: the desk-scale stand-in. Items must parse as
// integers. Descriptors are rules from the grammar
//     value >= C | value < C | value mod M in [A..B],  M in {2,4,...,512}
// and mining is an exhaustive search maximizing accuracy on the request
// (ties: smallest M with thresholds ranked as M=1, then smallest C/A).
// ---------------------------------------------------------------------------

struct IntegerRule {
    enum class Kind { ge, lt, mod };
    Kind kind = Kind::ge;
    long c = 0;        // threshold
    long m = 0, a = 0, b = 0;  // modular interval

    bool eval(long v) const {
        switch (kind) {
            case Kind::ge: return v >= c;
            case Kind::lt: return v < c;
            case Kind::mod: {
                long r = ((v % m) + m) % m;
                return r >= a && r <= b;
            }
        }
        return false;
    }

    std::string to_text() const {
        switch (kind) {
            case Kind::ge: return "value >= " + std::to_string(c);
            case Kind::lt: return "value < " + std::to_string(c);
            case Kind::mod:
                return "value mod " + std::to_string(m) + " in [" + std::to_string(a) + ".." +
                       std::to_string(b) + "]";
        }
        return "";
    }

    static std::optional<IntegerRule> parse(const std::string& text) {
        IntegerRule r;
        {
            std::istringstream ss(text);
            std::string w1, w2;
            long c;
            if (ss >> w1 >> w2 >> c && w1 == "value" && (w2 == ">=" || w2 == "<")) {
                std::string rest;
                if (!(ss >> rest)) {
                    r.kind = w2 == ">=" ? Kind::ge : Kind::lt;
                    r.c = c;
                    return r;
                }
            }
        }
        {
            std::istringstream ss(text);
            std::string w1, w2, w4;
            long m;
            std::string interval;
            if (ss >> w1 >> w2 >> m >> w4 >> interval && w1 == "value" && w2 == "mod" && w4 == "in") {
                long a, b;
                if (std::sscanf(interval.c_str(), "[%ld..%ld]", &a, &b) == 2) {
                    r.kind = Kind::mod;
                    r.m = m;
                    r.a = a;
                    r.b = b;
                    if (m >= 2 && a >= 0 && a <= b && b < m) return r;
                }
            }
        }
        return std::nullopt;
    }
};

class SyntheticIntegerOracle final : public Oracle {
public:
    int extract(const SemanticItem& item, const FeatureDescriptor& descriptor) override {
        auto rule = IntegerRule::parse(descriptor.text);
        if (!rule) throw OracleError("synthetic oracle cannot parse rule: '" + descriptor.text + "'");
        return rule->eval(parse_value(item)) ? 1 : 0;
    }

    FeatureDescriptor mine(const MiningRequest& req) override {
        std::lock_guard<std::mutex> lock(mine_mutex_);
        req.validate();
        std::vector<long> pos, neg;
        for (const auto& s : req.positives) pos.push_back(parse_value(s));
        for (const auto& s : req.negatives) neg.push_back(parse_value(s));
        return FeatureDescriptor{best_rule(pos, neg).to_text()};
    }

    std::vector<FeatureDescriptor> propose_zero_shot(const std::vector<SemanticItem>&, const std::string&,
                                                     int) override {
        throw OracleError("synthetic oracle has no task semantics; zero-shot proposal unsupported");
    }

    std::string name() const override { return "synthetic"; }

    /// Exposed for tests: exhaustive rule search over the grammar.
    static IntegerRule best_rule(const std::vector<long>& pos, const std::vector<long>& neg) {
        const size_t total = pos.size() + neg.size();
        IntegerRule best;
        long best_correct = -1;
        auto consider = [&](const IntegerRule& r, long correct) {
            if (correct > best_correct) {
                best = r;
                best_correct = correct;
            }
        };

        // Threshold rules; candidate cut points are the observed values plus
        // one past the maximum. Scanned first (rank m=1), c ascending.
        std::vector<long> cuts;
        cuts.insert(cuts.end(), pos.begin(), pos.end());
        cuts.insert(cuts.end(), neg.begin(), neg.end());
        long maxv = *std::max_element(cuts.begin(), cuts.end());
        cuts.push_back(maxv + 1);
        std::sort(cuts.begin(), cuts.end());
        cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
        for (IntegerRule::Kind kind : {IntegerRule::Kind::ge, IntegerRule::Kind::lt}) {
            for (long c : cuts) {
                IntegerRule r;
                r.kind = kind;
                r.c = c;
                long correct = 0;
                for (long v : pos) correct += r.eval(v) ? 1 : 0;
                for (long v : neg) correct += r.eval(v) ? 0 : 1;
                consider(r, correct);
            }
        }

        // Modular interval rules via residue histograms and prefix sums:
        // pos_in([a,b]) + neg_out([a,b]) in O(1) per interval.
        for (long m = 2; m <= 512; m *= 2) {
            std::vector<long> ph(static_cast<size_t>(m) + 1, 0), nh(static_cast<size_t>(m) + 1, 0);
            for (long v : pos) ph[static_cast<size_t>(((v % m) + m) % m) + 1]++;
            for (long v : neg) nh[static_cast<size_t>(((v % m) + m) % m) + 1]++;
            for (long i = 1; i <= m; ++i) {
                ph[static_cast<size_t>(i)] += ph[static_cast<size_t>(i) - 1];
                nh[static_cast<size_t>(i)] += nh[static_cast<size_t>(i) - 1];
            }
            long neg_total = static_cast<long>(neg.size());
            for (long a = 0; a < m; ++a) {
                for (long b = a; b < m; ++b) {
                    long pos_in = ph[static_cast<size_t>(b) + 1] - ph[static_cast<size_t>(a)];
                    long neg_in = nh[static_cast<size_t>(b) + 1] - nh[static_cast<size_t>(a)];
                    long correct = pos_in + (neg_total - neg_in);
                    if (correct > best_correct) {
                        IntegerRule r;
                        r.kind = IntegerRule::Kind::mod;
                        r.m = m;
                        r.a = a;
                        r.b = b;
                        best = r;
                        best_correct = correct;
                    }
                }
            }
        }
        (void)total;
        return best;
    }

    static long parse_value(const SemanticItem& item) {
        try {
            size_t used = 0;
            long v = std::stol(item.text, &used);
            while (used < item.text.size() && std::isspace(static_cast<unsigned char>(item.text[used]))) ++used;
            if (used != item.text.size()) throw std::invalid_argument("trailing text");
            return v;
        } catch (const std::exception&) {
            throw OracleError("synthetic oracle: item '" + item.id + "' does not parse as an integer");
        }
    }

private:
    std::mutex mine_mutex_;
};

// ---------------------------------------------------------------------------
// Transcript: append-only JSON-lines of (request hash, response). Replaying
// a transcript reproduces byte-identical responses for identical requests.
// ---------------------------------------------------------------------------

class TranscriptWriter {
public:
    explicit TranscriptWriter(const std::string& path) : out_(path, std::ios::app) {
        if (!out_) throw ValidationError("cannot open transcript for append: " + path);
    }

    void record(const std::string& model, const std::string& prompt, const std::string& response) {
        std::lock_guard<std::mutex> lock(mu_);
        json j;
        j["hash"] = fnv1a64_hex(prompt);
        j["model"] = model;
        j["prompt"] = prompt;
        j["response"] = response;
        out_ << j.dump() << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
    std::mutex mu_;
};

/// Reads a transcript into per-hash response queues. Identical requests are
/// served in recorded order; once a queue empties its last response sticks
/// (the live backend serves repeats from cache without re-recording them).
class TranscriptReader {
public:
    explicit TranscriptReader(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ValidationError("cannot open transcript: " + path);
        std::string line;
        size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            json j = json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.contains("hash") || !j.contains("response"))
                throw ParseError("transcript " + path + ": bad entry at line " + std::to_string(lineno));
            queues_[j["hash"].get<std::string>()].push_back(j["response"].get<std::string>());
        }
    }

    std::string lookup(const std::string& prompt_hash) {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = queues_.find(prompt_hash);
        if (it == queues_.end() || it->second.empty())
            throw OracleError("transcript has no response for request hash " + prompt_hash);
        if (it->second.size() == 1) return it->second.front();
        std::string r = it->second.front();
        it->second.pop_front();
        return r;
    }

private:
    std::map<std::string, std::deque<std::string>> queues_;
    std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Prompted oracle: builds the template prompts, talks to a chat-completion
// endpoint through an injectable completion function, caches responses by
// prompt hash, and records every network exchange to the transcript.
// The replay backend is the same class with a transcript-backed completion.
// ---------------------------------------------------------------------------

/// (model name, prompt) -> raw response text. Throwing OracleError with
/// retriable=true triggers the retry policy.
using CompletionFn = std::function<std::string(const std::string& model, const std::string& prompt)>;

struct PromptedOracleConfig {
    std::string extract_model = "extract-model";
    std::string mine_model = "mine-model";
    int batch_chunk = 64;          // items per extract_batch call
    int max_attempts = 3;          // transport retries, exponential backoff
    int backoff_ms = 100;
    int max_in_flight = 4;         // concurrent completion calls
    bool cache_responses = true;
};

class PromptedOracle final : public Oracle {
public:
    PromptedOracle(PromptTemplates templates, PromptedOracleConfig cfg, CompletionFn completion,
                   std::shared_ptr<TranscriptWriter> transcript = nullptr, std::string backend_name = "remote")
        : templates_(std::move(templates)),
          cfg_(cfg),
          completion_(std::move(completion)),
          transcript_(std::move(transcript)),
          name_(std::move(backend_name)) {}

    int extract(const SemanticItem& item, const FeatureDescriptor& descriptor) override {
        std::string prompt = render_prompt(templates_.extract_single,
                                           {{"item", item.text}, {"feature", descriptor.text}});
        json j = complete_json(cfg_.extract_model, prompt, "applies");
        return parse_bit(j["applies"]);
    }

    std::vector<int> extract_batch(const std::vector<SemanticItem>& items,
                                   const FeatureDescriptor& descriptor) override {
        if (items.empty()) throw ValidationError("extract_batch on empty item list");
        std::vector<int> out(items.size(), 0);
        for (size_t lo = 0; lo < items.size(); lo += static_cast<size_t>(cfg_.batch_chunk)) {
            size_t hi = std::min(items.size(), lo + static_cast<size_t>(cfg_.batch_chunk));
            std::ostringstream listing;
            for (size_t i = lo; i < hi; ++i) listing << i << ". " << items[i].text << "\n";
            std::string prompt = render_prompt(templates_.extract_batch,
                                               {{"items", listing.str()}, {"feature", descriptor.text}});
            // An out-of-range index invalidates the whole chunk response;
            // retried as malformed.
            int chunk_attempts = 0;
            for (;;) {
                json j = complete_json(cfg_.extract_model, prompt, "matched_items");
                std::vector<size_t> matched;
                bool ok = j["matched_items"].is_array();
                if (ok) {
                    for (const auto& v : j["matched_items"]) {
                        long idx = -1;
                        if (v.is_number_integer())
                            idx = v.get<long>();
                        else if (v.is_string()) {
                            try {
                                idx = std::stol(v.get<std::string>());
                            } catch (...) {
                                ok = false;
                            }
                        } else
                            ok = false;
                        if (idx < static_cast<long>(lo) || idx >= static_cast<long>(hi)) ok = false;
                        if (!ok) break;
                        matched.push_back(static_cast<size_t>(idx));
                    }
                }
                if (ok) {
                    for (size_t idx : matched) out[idx] = 1;
                    break;
                }
                if (++chunk_attempts >= cfg_.max_attempts)
                    throw OracleError("batched extraction chunk rejected after retries");
                prompt = reformat_reminder(prompt);
            }
        }
        return out;
    }

    FeatureDescriptor mine(const MiningRequest& req) override {
        std::lock_guard<std::mutex> lock(mine_mutex_);
        req.validate();
        auto listing = [](const std::vector<SemanticItem>& v) {
            std::ostringstream ss;
            for (const auto& s : v) ss << s.text << "\n";
            return ss.str();
        };
        std::string prompt = render_prompt(
            templates_.mine, {{"positive", listing(req.positives)}, {"negative", listing(req.negatives)}});
        json j = complete_json(cfg_.mine_model, prompt, "characteristic");
        std::string text;
        if (j["characteristic"].is_string())
            text = j["characteristic"].get<std::string>();
        else if (j["characteristic"].is_array() && !j["characteristic"].empty() &&
                 j["characteristic"][0].is_string())
            text = j["characteristic"][0].get<std::string>();
        if (text.empty()) throw OracleError("mining response carried no characteristic text");
        // Stored verbatim, conjunctions included; extraction defines meaning.
        return FeatureDescriptor{text};
    }

    std::vector<FeatureDescriptor> propose_zero_shot(const std::vector<SemanticItem>& items,
                                                     const std::string& task_description, int n) override {
        std::ostringstream listing;
        for (size_t i = 0; i < items.size(); ++i) listing << i << ". " << items[i].text << "\n";
        std::string prompt = render_prompt(templates_.propose, {{"items", listing.str()},
                                                                {"task", task_description},
                                                                {"n", std::to_string(n)}});
        json j = complete_json(cfg_.mine_model, prompt, "characteristics");
        if (!j["characteristics"].is_array())
            throw OracleError("zero-shot response carried no characteristics array");
        std::vector<FeatureDescriptor> out;
        std::set<std::string> seen;
        for (const auto& v : j["characteristics"]) {
            if (!v.is_string()) continue;
            std::string s = v.get<std::string>();
            if (!s.empty() && seen.insert(s).second) out.push_back(FeatureDescriptor{s});
        }
        if (out.empty()) throw OracleError("zero-shot response carried no usable characteristics");
        return out;
    }

    std::string name() const override { return name_; }

private:
    static std::string reformat_reminder(const std::string& prompt) {
        return prompt + "\nReminder: respond with exactly the JSON object requested, nothing else.\n";
    }

    static int parse_bit(const json& v) {
        if (v.is_number_integer()) {
            long x = v.get<long>();
            if (x == 0 || x == 1) return static_cast<int>(x);
        }
        if (v.is_boolean()) return v.get<bool>() ? 1 : 0;
        if (v.is_string()) {
            const std::string& s = v.get<std::string>();
            if (s == "0" || s == "1") return s == "1";
        }
        if (v.is_array() && v.size() == 1) return parse_bit(v[0]);
        throw OracleError("extraction response 'applies' field is not a bit");
    }

    /// Extract the outermost JSON object from a possibly chatty response.
    static std::optional<json> find_json_object(const std::string& text, const std::string& required_field) {
        size_t start = 0;
        while ((start = text.find('{', start)) != std::string::npos) {
            int depth = 0;
            for (size_t i = start; i < text.size(); ++i) {
                if (text[i] == '{') ++depth;
                if (text[i] == '}') {
                    --depth;
                    if (depth == 0) {
                        json j = json::parse(text.substr(start, i - start + 1), nullptr, false);
                        if (!j.is_discarded() && j.is_object() && j.contains(required_field)) return j;
                        break;
                    }
                }
            }
            ++start;
        }
        return std::nullopt;
    }

    std::string raw_complete(const std::string& model, const std::string& prompt) {
        std::string h = fnv1a64_hex(prompt);
        if (cfg_.cache_responses) {
            std::lock_guard<std::mutex> lock(cache_mutex_);
            auto it = cache_.find(h);
            if (it != cache_.end()) return it->second;
        }
        {
            std::unique_lock<std::mutex> lk(inflight_mutex_);
            inflight_cv_.wait(lk, [&] { return in_flight_ < cfg_.max_in_flight; });
            ++in_flight_;
        }
        std::string response;
        std::exception_ptr err;
        try {
            int backoff = cfg_.backoff_ms;
            for (int attempt = 1;; ++attempt) {
                try {
                    response = completion_(model, prompt);
                    break;
                } catch (const OracleError& e) {
                    if (!e.retriable || attempt >= cfg_.max_attempts) throw;
                    std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
                    backoff *= 2;
                }
            }
        } catch (...) {
            err = std::current_exception();
        }
        {
            std::lock_guard<std::mutex> lk(inflight_mutex_);
            --in_flight_;
        }
        inflight_cv_.notify_one();
        if (err) std::rethrow_exception(err);
        if (transcript_) transcript_->record(model, prompt, response);
        if (cfg_.cache_responses) {
            std::lock_guard<std::mutex> lock(cache_mutex_);
            cache_[h] = response;
        }
        return response;
    }

    json complete_json(const std::string& model, const std::string& prompt,
                       const std::string& required_field) {
        std::string response = raw_complete(model, prompt);
        auto j = find_json_object(response, required_field);
        if (j) return *j;
        // One reformat-reminder retry for malformed JSON.
        response = raw_complete(model, reformat_reminder(prompt));
        j = find_json_object(response, required_field);
        if (j) return *j;
        throw OracleError("oracle response missing field '" + required_field + "' after reformat retry");
    }

    PromptTemplates templates_;
    PromptedOracleConfig cfg_;
    CompletionFn completion_;
    std::shared_ptr<TranscriptWriter> transcript_;
    std::string name_;
    std::map<std::string, std::string> cache_;
    std::mutex cache_mutex_;
    std::mutex mine_mutex_;
    std::mutex inflight_mutex_;
    std::condition_variable inflight_cv_;
    int in_flight_ = 0;
};

/// Replay backend: the prompted oracle with a transcript-lookup completion.
inline std::unique_ptr<PromptedOracle> make_replay_oracle(PromptTemplates templates,
                                                          PromptedOracleConfig cfg,
                                                          std::shared_ptr<TranscriptReader> reader) {
    CompletionFn fn = [reader](const std::string&, const std::string& prompt) {
        return reader->lookup(fnv1a64_hex(prompt));
    };
    return std::make_unique<PromptedOracle>(std::move(templates), cfg, std::move(fn), nullptr, "replay");
}

}  // namespace semfeat
