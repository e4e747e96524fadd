#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "semfeat/common.hpp"

namespace semfeat {

// ---------------------------------------------------------------------------
// Prompt templates. The canonical copies live in prompts/*.txt so they can
// be audited and edited without rebuilding; the builtin strings below are
// byte-identical fallbacks used when no directory is configured.
// Placeholders: {item} {items} {feature} {positive} {negative} {task} {n}.
// ---------------------------------------------------------------------------

struct PromptTemplates {
    std::string extract_single;  // classify one item against one feature
    std::string extract_batch;   // classify an item list against one feature
    std::string mine;            // name the characteristic separating two groups
    std::string propose;         // ask for ~n useful yes/no characteristics

    static PromptTemplates builtin() {
        PromptTemplates p;
        p.extract_single =
            "For item '{item}' first describe its characteristics.\n"
            "\n"
            "Then consider this feature:\n"
            "\n"
            "'{feature}'\n"
            "\n"
            "Finally, output a JSON object with an answer determining if the feature applies to the item.\n"
            "\n"
            "{ \"applies\": [0 or 1] }\n";
        p.extract_batch =
            "For item list '{items}' first describe items characteristics.\n"
            "\n"
            "Then consider this feature:\n"
            "\n"
            "'{feature}'\n"
            "\n"
            "Finally, output a JSON object where the keys are the item numbers that satisfy the feature:\n"
            "\n"
            "{ \"matched_items\": [list] }\n";
        p.mine =
            "Consider the two groups and first describe the items and their characteristics.\n"
            "\n"
            "Positive:\n"
            "'{positive}'\n"
            "\n"
            "Negative:\n"
            "'{negative}'\n"
            "\n"
            "What characteristic/feature separates the positive group? Think step by step then output the "
            "answer as a JSON object\n"
            "\n"
            "{ \"characteristic\": [text] }\n";
        p.propose =
            "Consider this list of items:\n"
            "'{items}'\n"
            "\n"
            "Task: {task}\n"
            "\n"
            "Propose around {n} distinct yes/no characteristics of the items whose answers would be most "
            "useful for this task. Think step by step then output the answer as a JSON object\n"
            "\n"
            "{ \"characteristics\": [list] }\n";
        return p;
    }

    static PromptTemplates from_dir(const std::string& dir) {
        auto read = [&](const char* name) {
            std::filesystem::path p = std::filesystem::path(dir) / name;
            std::ifstream in(p);
            if (!in) throw ConfigError("cannot open prompt template: " + p.string());
            std::ostringstream ss;
            ss << in.rdbuf();
            return ss.str();
        };
        PromptTemplates p;
        p.extract_single = read("e_prompt1.txt");
        p.extract_batch = read("e_prompt2.txt");
        p.mine = read("m_prompt.txt");
        p.propose = read("z_prompt.txt");
        return p;
    }
};

/// Replace known {placeholder} tokens only; everything else (including the
/// JSON exemplar braces) passes through untouched.
inline std::string render_prompt(const std::string& tpl,
                                 const std::vector<std::pair<std::string, std::string>>& subs) {
    std::string out = tpl;
    for (const auto& [key, value] : subs) {
        std::string token = "{" + key + "}";
        size_t pos = 0;
        while ((pos = out.find(token, pos)) != std::string::npos) {
            out.replace(pos, token.size(), value);
            pos += value.size();
        }
    }
    return out;
}

}  // namespace semfeat
