#include "support.hpp"

#include "dualinc/errors.hpp"
#include "dualinc/model.hpp"
#include "dualinc/stream.hpp"

#include <doctest.h>

#include <fstream>
#include <set>
#include <sstream>

using namespace dualinc;
using namespace dualinc::stream;
namespace fs = std::filesystem;

namespace {

std::vector<TaskFamilySpec> specs_for(std::vector<Family> fams, std::size_t n_train, std::size_t n_eval) {
    std::vector<TaskFamilySpec> out;
    for (auto f : fams) {
        TaskFamilySpec s;
        s.family = f;
        s.name = to_string(f);
        s.n_train = n_train;
        s.n_eval = n_eval;
        out.push_back(s);
    }
    return out;
}

std::vector<int> trailing_digits(const std::string& text) {
    std::vector<int> xs;
    for (const auto& w : tokenize_words(text)) {
        if (w.size() == 1 && std::isdigit(static_cast<unsigned char>(w[0]))) xs.push_back(w[0] - '0');
        else if (w != "mask") xs.clear();
    }
    return xs;
}

std::string digits(const std::vector<int>& xs) {
    std::string s;
    for (int x : xs) s += (s.empty() ? "" : " ") + std::to_string(x);
    return s;
}

// Recomputes the expected response from the instruction text alone.
std::string oracle(Family f, const InstructionInstance& inst) {
    const auto& text = inst.instruction;
    switch (f) {
        case Family::modular_add: {
            const auto colon = text.find(" : ");
            const auto head = tokenize_words(text.substr(0, colon));
            const int p = std::stoi(head.back());
            int s = 0;
            for (int x : trailing_digits(text.substr(colon + 3))) s += x;
            return std::to_string(s % p);
        }
        case Family::reverse: {
            auto xs = trailing_digits(text);
            std::reverse(xs.begin(), xs.end());
            return digits(xs);
        }
        case Family::sort_tokens: {
            auto xs = trailing_digits(text);
            std::sort(xs.begin(), xs.end());
            return digits(xs);
        }
        case Family::parity: {
            int s = 0;
            for (int x : trailing_digits(text)) s += x;
            return std::to_string(s % 2);
        }
        case Family::copy_masked: {
            const auto words = tokenize_words(text);
            std::vector<int> xs;
            for (std::size_t i = words.size() - 4; i < words.size(); ++i)
                if (words[i] != "mask") xs.push_back(words[i][0] - '0');
            return digits(xs);
        }
        case Family::feature_classify: {
            const auto it = std::max_element(inst.features.begin(), inst.features.begin() + 4);
            return std::to_string(it - inst.features.begin());
        }
    }
    return {};
}

std::string read_all(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("modular_add worked example") {
    const auto tasks = generate_tasks(specs_for({Family::modular_add, Family::parity}, 15000, 10), 3);
    InstructionInstance ex;
    ex.instruction = "add the numbers modulo 7 : 3 5";
    CHECK(oracle(Family::modular_add, ex) == "1");
    bool found = false;
    for (const auto& inst : tasks[0].train) {
        if (inst.instruction == ex.instruction) {
            found = true;
            CHECK(inst.response == "1");
        }
    }
    CHECK(found);
}

TEST_CASE("responses agree with an independent oracle") {
    const auto tasks = generate_tasks(specs_for(all_families(), 1000, 100), 4);
    for (const auto& t : tasks) {
        std::size_t agree = 0, total = 0;
        for (const auto* set : {&t.train, &t.eval}) {
            for (const auto& inst : *set) {
                agree += oracle(t.family, inst) == inst.response;
                ++total;
            }
        }
        INFO(t.name);
        // feature_classify is noisy; its class is usually the argmax.
        if (t.family == Family::feature_classify) CHECK(double(agree) / double(total) > 0.95);
        else CHECK(agree == total);
        CHECK((t.family == Family::feature_classify) == !t.train[0].features.empty());
    }
}

TEST_CASE("generation is deterministic and byte-identical") {
    testing::TempDir a("stream_a"), b("stream_b"), c("stream_c");
    const auto specs = specs_for({Family::reverse, Family::feature_classify, Family::copy_masked}, 50, 10);
    const auto ma = generate_stream(specs, 9, a.path());
    const auto mb = generate_stream(specs, 9, b.path());
    const auto mc = generate_stream(specs, 10, c.path());
    CHECK(ma.digest == mb.digest);
    CHECK(ma.digest != mc.digest);
    for (const auto& e : ma.tasks) {
        CHECK(read_all(a.path() / e.train_file) == read_all(b.path() / e.train_file));
        CHECK(read_all(a.path() / e.eval_file) == read_all(b.path() / e.eval_file));
    }
    CHECK(read_all(a.path() / "manifest.json") == read_all(b.path() / "manifest.json"));
}

TEST_CASE("train and eval are disjoint") {
    const auto tasks = generate_tasks(specs_for(all_families(), 500, 200), 5);
    for (const auto& t : tasks) {
        std::set<std::pair<std::string, std::vector<double>>> train;
        for (const auto& i : t.train) train.insert({i.instruction, i.features});
        CHECK(train.size() == t.train.size());
        for (const auto& i : t.eval) CHECK(train.count({i.instruction, i.features}) == 0);
    }
}

TEST_CASE("load round trip and tamper detection") {
    testing::TempDir dir("stream_rt");
    const auto specs = specs_for({Family::sort_tokens, Family::feature_classify}, 40, 8);
    const auto m = generate_stream(specs, 6, dir.path());
    const auto expected = generate_tasks(specs, 6);
    const auto loaded = load_stream(dir.path() / "manifest.json");
    REQUIRE(loaded.size() == expected.size());
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].name == expected[i].name);
        CHECK(loaded[i].task_id == expected[i].task_id);
        CHECK(loaded[i].family == expected[i].family);
        CHECK(loaded[i].train == expected[i].train);
        CHECK(loaded[i].eval == expected[i].eval);
    }
    CHECK(verify_manifest(m, dir.path()));

    const fs::path victim = dir.path() / m.tasks[1].train_file;
    std::string bytes = read_all(victim);
    bytes[bytes.size() / 2] ^= 0x01;
    std::ofstream(victim, std::ios::binary) << bytes;
    CHECK_FALSE(verify_manifest(m, dir.path()));
    CHECK_THROWS_AS(load_stream(dir.path() / "manifest.json"), IntegrityError);

    fs::remove(victim);
    CHECK_THROWS_AS(load_stream(dir.path() / "manifest.json"), IntegrityError);
}

TEST_CASE("parse errors name the line") {
    testing::TempDir dir("stream_parse");
    const auto tasks = generate_tasks(specs_for({Family::reverse, Family::parity}, 30, 5), 7);
    std::string text;
    for (std::size_t i = 0; i < 20; ++i) {
        auto inst = tasks[0].train[i];
        if (i == 16) inst.response = "   ";
        text += to_jsonl_record("reverse", inst) + "\n";
    }
    const fs::path p = dir.path() / "bad.jsonl";
    std::ofstream(p) << text;
    try {
        read_jsonl(p);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 17);
        CHECK(std::string(e.what()).find(":17:") != std::string::npos);
        CHECK(std::string(e.what()).find("empty response") != std::string::npos);
    }

    const std::vector<std::pair<std::string, std::string>> bad = {
        {"{not json", "malformed"},
        {R"({"task":"t","instruction":"x","response":"1","extra":1})", "unknown field"},
        {R"({"task":"t","response":"1"})", "instruction"},
        {R"({"task":"t","instruction":"x","response":"1","features":"no"})", "features"},
    };
    for (const auto& [line, why] : bad) {
        std::ofstream(p) << to_jsonl_record("t", tasks[0].train[0]) << "\n" << line << "\n";
        try {
            read_jsonl(p);
            FAIL("expected a parse error");
        } catch (const ParseError& e) {
            CHECK(e.line() == 2);
            CHECK(std::string(e.what()).find(why) != std::string::npos);
        }
    }
}

TEST_CASE("templates are distinguishable and in vocabulary") {
    const auto& vocab = model::Vocabulary::standard();
    const std::size_t v = model::ToyModelConfig{}.vocab_size;
    for (auto a : all_families()) {
        CHECK(templates(a).size() >= 3);
        for (auto b : all_families()) {
            if (a != b) CHECK(template_overlap(a, b) < kMaxTemplateOverlap);
        }
    }
    const auto tasks = generate_tasks(specs_for(all_families(), 300, 50), 8);
    for (const auto& t : tasks) {
        for (const auto& inst : t.train) {
            for (int id : vocab.encode(inst.instruction)) CHECK(std::size_t(id) < v);
            for (int id : vocab.encode(inst.response)) CHECK(std::size_t(id) < v);
        }
    }
    for (const auto& inst : generate_pretraining_corpus(500, 2)) {
        CHECK_NOTHROW(vocab.encode(inst.instruction));
        CHECK_NOTHROW(vocab.encode(inst.response));
    }
}

TEST_CASE("generation errors") {
    CHECK_THROWS_AS(generate_tasks(specs_for({Family::reverse}, 10, 10), 1), DataError);
    CHECK_THROWS_AS(generate_tasks(specs_for({Family::reverse, Family::parity}, 0, 10), 1), DataError);
    // reverse has only 3 templates x 1000 payloads.
    CHECK_THROWS_AS(generate_tasks(specs_for({Family::reverse, Family::parity}, 3000, 10), 1), DataError);
    auto dup = specs_for({Family::reverse, Family::parity}, 10, 10);
    dup[1].name = dup[0].name;
    CHECK_THROWS_AS(generate_tasks(dup, 1), DataError);
    CHECK_THROWS_AS(family_from_string("vqa"), ConfigError);
}

TEST_CASE("canonical responses") {
    CHECK(canonicalize_response("  3\t 1  2 ") == "3 1 2");
    CHECK(canonicalize_response("Cat DOG") == "cat dog");
    CHECK(canonicalize_response("") == "");
    for (auto f : all_families()) CHECK(family_from_string(to_string(f)) == f);
}
