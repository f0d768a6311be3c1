#pragma once

#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

// Closed-vocabulary word tokenizer. The vocabulary covers the start/end/pad
// markers plus every template and class word; anything else is an error.

namespace fap {

class Tokenizer {
public:
    static constexpr const char* kStart = "<start>";
    static constexpr const char* kEnd = "<end>";
    static constexpr const char* kPad = "<pad>";

    explicit Tokenizer(const std::vector<std::string>& words) {
        add(kStart);
        add(kEnd);
        add(kPad);
        for (const auto& w : words) add(w);
    }

    static Tokenizer shapes_vocab() {
        return Tokenizer({"a", "photo", "of", "red", "green", "blue", "yellow",
                          "circle", "square", "triangle", "cross"});
    }

    std::size_t vocab_size() const { return id_to_word_.size(); }

    std::size_t id(const std::string& word) const {
        auto it = word_to_id_.find(word);
        if (it == word_to_id_.end()) throw std::invalid_argument("tokenizer: unknown word '" + word + "'");
        return it->second;
    }

    const std::string& word(std::size_t id) const {
        if (id >= id_to_word_.size()) throw std::invalid_argument("tokenizer: id out of range");
        return id_to_word_[id];
    }

    // whitespace split; no markers added
    std::vector<std::size_t> encode(const std::string& text) const {
        std::vector<std::size_t> ids;
        std::istringstream ss(text);
        std::string w;
        while (ss >> w) ids.push_back(id(w));
        return ids;
    }

    std::string decode(const std::vector<std::size_t>& ids) const {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) out += " ";
            out += word(ids[i]);
        }
        return out;
    }

    std::size_t start_id() const { return id(kStart); }
    std::size_t end_id() const { return id(kEnd); }
    std::size_t pad_id() const { return id(kPad); }

private:
    void add(const std::string& w) {
        if (word_to_id_.count(w)) return;
        word_to_id_[w] = id_to_word_.size();
        id_to_word_.push_back(w);
    }

    std::map<std::string, std::size_t> word_to_id_;
    std::vector<std::string> id_to_word_;
};

}  // namespace fap
