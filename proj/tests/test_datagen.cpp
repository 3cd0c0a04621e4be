// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "maemi/datagen.hpp"

using namespace maemi;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("maemi_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_ppm(const fs::path& p, std::uint8_t seed) {
    RawImage img;
    img.height = 4;
    img.width = 4;
    img.values.resize(48);
    for (std::size_t i = 0; i < img.values.size(); ++i) img.values[i] = static_cast<float>((seed * 37 + i * 11) % 256);
    fs::create_directories(p.parent_path());
    detail::write_file_bytes(p, encode_ppm(img));
}

std::string slurp(const fs::path& p) {
    const auto b = detail::read_file_bytes(p);
    return {b.begin(), b.end()};
}

std::string answer_for(const ImageEntry& im, const std::string& tag, const std::string& style) {
    return "the " + (im.category.empty() ? std::string("sample") : im.category) + " shows " + tag + " detail (" + style + ")";
}

TeacherClient mock_client(const fs::path& dir, int parallel = 1) {
    TeacherConfig cfg;
    cfg.mode = TeacherConfig::Mode::mock;
    cfg.mock_dir = dir;
    cfg.parallel = parallel;
    return TeacherClient(cfg);
}

Errc code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    return Errc::InvalidArgument;
}

// Three images under two category folders plus mock answers for each template.
struct MockTree {
    TempDir root{"datagen_tree"};
    fs::path images = root.path / "images";
    fs::path mock = root.path / "mock";
    fs::path out = root.path / "data" / "qa.jsonl";
    MockTree() {
        write_ppm(images / "MOF" / "a.ppm", 1);
        write_ppm(images / "MOF" / "b.ppm", 2);
        write_ppm(images / "Nanowires" / "c.ppm", 3);
        write_mock_answers(images, mock, answer_for);
    }
};

std::vector<std::size_t> brute_rank(const std::vector<float>& q, const Tensor<float>& c, std::vector<std::size_t> cand,
                                    std::size_t k, bool ascending) {
    std::vector<double> sim(c.rows());
    for (std::size_t i = 0; i < c.rows(); ++i) {
        double dot = 0, nq = 0, nc = 0;
        for (std::size_t j = 0; j < q.size(); ++j) {
            dot += double(q[j]) * c(i, j);
            nq += double(q[j]) * q[j];
            nc += double(c(i, j)) * c(i, j);
        }
        sim[i] = dot / std::sqrt(nq * nc);
    }
    std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
        return ascending ? sim[a] < sim[b] : sim[a] > sim[b];
    });
    cand.resize(k);
    return cand;
}

}  // namespace

TEST(Templates, TenDistinctCategories) {
    const auto& ts = prompt_templates();
    std::set<std::string> cats;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        cats.insert(ts[i].category);
        EXPECT_EQ(template_index(ts[i].category), i);
        EXPECT_TRUE(is_template_category(ts[i].category));
    }
    EXPECT_EQ(cats.size(), 10u);
    EXPECT_FALSE(is_template_category("nope"));
    for (const auto& q : render_templates("ZIF-8")) {
        EXPECT_NE(q.find("ZIF-8"), std::string::npos);
        EXPECT_EQ(q.find(kMaterialPlaceholder), std::string::npos);
    }
}

TEST(Splits, EightyTenTenOnHundred) {
    std::vector<std::string> keys;
    for (int i = 0; i < 100; ++i) keys.push_back("img" + std::to_string(i) + ".ppm");
    const auto a = assign_splits(keys, {0.8, 0.1, 0.1}, 3);
    std::map<std::string, int> n;
    for (const auto& [k, s] : a) ++n[s];
    EXPECT_EQ(n["train"], 80);
    EXPECT_EQ(n["val"], 10);
    EXPECT_EQ(n["test"], 10);
    EXPECT_EQ(assign_splits(keys, {0.8, 0.1, 0.1}, 3), a);
    EXPECT_NE(assign_splits(keys, {0.8, 0.1, 0.1}, 4), a);
}

TEST(Splits, CountsApportionment) {
    EXPECT_EQ(split_counts(3, {0.8, 0.1, 0.1}), (std::vector<std::size_t>{1, 1, 1}));
    EXPECT_EQ(split_counts(2, {0.8, 0.1, 0.1}), (std::vector<std::size_t>{2, 0, 0}));
    EXPECT_EQ(split_counts(7, {0.5, 0.5, 0.0}), (std::vector<std::size_t>{4, 3, 0}));
    for (std::size_t n = 0; n < 50; ++n) {
        const auto c = split_counts(n, {0.7, 0.2, 0.1});
        EXPECT_EQ(std::accumulate(c.begin(), c.end(), std::size_t{0}), n);
    }
    EXPECT_EQ(code_of([] { (void)split_counts(5, {0.5, 0.4}); }), Errc::BadConfig);
    EXPECT_EQ(code_of([] { (void)split_counts(5, {1.2, -0.2}); }), Errc::BadConfig);
}

TEST(Datagen, MockPipelineProducesTenPerImage) {
    MockTree t;
    auto client = mock_client(t.mock);
    const auto c = generate_dataset(t.images, client, t.out);
    EXPECT_EQ(c.images, 3u);
    EXPECT_EQ(c.total, 30u);
    EXPECT_EQ(c.generated, 30u);
    EXPECT_EQ(c.per_split.at("train") + c.per_split.at("val") + c.per_split.at("test"), 30u);
    const auto recs = load_dataset(t.out);
    ASSERT_EQ(recs.size(), 30u);
    std::map<std::string, std::set<std::string>> split_of_image;
    for (const auto& r : recs) {
        split_of_image[r.image].insert(r.split);
        EXPECT_EQ(r.answer, answer_for({{}, "", r.category}, r.template_tag, "long"));
        EXPECT_EQ(r.answer_style, "long");
    }
    for (const auto& [img, s] : split_of_image) EXPECT_EQ(s.size(), 1u) << img;
    EXPECT_EQ(recs[0].image, "../images/MOF/a.ppm");
    EXPECT_EQ(recs[0].template_tag, prompt_templates()[0].category);
}

TEST(Datagen, RerunIsByteIdentical) {
    MockTree t;
    auto client = mock_client(t.mock, 4);
    (void)generate_dataset(t.images, client, t.out);
    const auto first = slurp(t.out);
    const auto mtime = fs::last_write_time(t.out);
    const auto again = generate_dataset(t.images, client, t.out);
    EXPECT_EQ(again.generated, 0u);
    EXPECT_EQ(again.existing, 30u);
    EXPECT_EQ(slurp(t.out), first);
    EXPECT_EQ(fs::last_write_time(t.out), mtime);
}

TEST(Datagen, ResumesAfterInterruption) {
    MockTree t;
    auto client = mock_client(t.mock);
    (void)generate_dataset(t.images, client, t.out);
    const auto full = slurp(t.out);

    // Keep the first 12 lines, as if the run stopped there.
    std::string partial;
    std::istringstream is(full);
    std::string line;
    for (int i = 0; i < 12 && std::getline(is, line); ++i) partial += line + "\n";
    detail::write_file_bytes(t.out, std::vector<std::uint8_t>(partial.begin(), partial.end()));
    const auto c = generate_dataset(t.images, client, t.out);
    EXPECT_EQ(c.existing, 12u);
    EXPECT_EQ(c.generated, 18u);
    EXPECT_EQ(slurp(t.out), full);
}

TEST(Datagen, MockMissKeepsFinishedRecords) {
    MockTree t;
    // Drop one answer; the run fails but what was written survives a retry.
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(t.mock)) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    const auto held = slurp(files[0]);
    fs::remove(files[0]);
    auto client = mock_client(t.mock);
    EXPECT_EQ(code_of([&] { (void)generate_dataset(t.images, client, t.out); }), Errc::MockMiss);
    const auto kept = load_dataset(t.out).size();
    EXPECT_GT(kept, 0u);
    detail::write_file_bytes(files[0], std::vector<std::uint8_t>(held.begin(), held.end()));
    const auto c = generate_dataset(t.images, client, t.out);
    EXPECT_EQ(c.existing, kept);
    EXPECT_EQ(c.total, 30u);
}

TEST(Datagen, BothStylesDoublesRecords) {
    MockTree t;
    write_mock_answers(t.images, t.mock, answer_for, true);
    auto client = mock_client(t.mock);
    DatagenOptions opt;
    opt.both_styles = true;
    const auto c = generate_dataset(t.images, client, t.out, opt);
    EXPECT_EQ(c.total, 60u);
    std::size_t shorts = 0;
    for (const auto& r : load_dataset(t.out))
        if (r.answer_style == "short") {
            ++shorts;
            EXPECT_NE(r.question.find(kBrevitySuffix.substr(1)), std::string::npos);
        }
    EXPECT_EQ(shorts, 30u);
}

TEST(Datagen, InputErrors) {
    TempDir d("datagen_err");
    auto client = mock_client(d.path);
    EXPECT_EQ(code_of([&] { (void)generate_dataset(d.path, client, d.path / "o.jsonl"); }), Errc::EmptyImageDir);
    EXPECT_EQ(code_of([&] { (void)generate_dataset(d.path / "missing", client, d.path / "o.jsonl"); }), Errc::IoError);
    EXPECT_EQ(code_of([] { (void)mock_client({}); }), Errc::BadConfig);
    EXPECT_EQ(code_of([&] { (void)client.request_qa({1, 2, 3}, "what?"); }), Errc::IoError);
}

TEST(Records, ParseValidation) {
    const nlohmann::json good{{"id", "a#x"},  {"image", "a.ppm"},    {"category", "MOF"}, {"question", "q?"},
                              {"answer", "a"}, {"template", kCaptionTag}, {"split", "train"}, {"answer_style", "long"}};
    EXPECT_EQ(parse_sample(good.dump(), 1).to_json(), good);
    for (const char* key : {"id", "question", "answer", "template", "split", "answer_style"}) {
        auto bad = good;
        bad.erase(key);
        EXPECT_EQ(code_of([&] { (void)parse_sample(bad.dump(), 1); }), Errc::MalformedRecord) << key;
    }
    auto bad = good;
    bad["split"] = "dev";
    EXPECT_EQ(code_of([&] { (void)parse_sample(bad.dump(), 1); }), Errc::MalformedRecord);
    bad = good;
    bad["template"] = "other";
    EXPECT_EQ(code_of([&] { (void)parse_sample(bad.dump(), 1); }), Errc::MalformedRecord);
    try {
        (void)parse_sample("{", 7);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("line 7"), std::string::npos);
    }
}

TEST(Teacher, ReplyParsingAndRequestShape) {
    EXPECT_EQ(TeacherClient::parse_reply(R"({"choices":[{"message":{"content":"hi"}}]})"), "hi");
    EXPECT_EQ(TeacherClient::parse_reply(R"({"choices":[{"message":{"content":[{"type":"text","text":"yo"}]}}]})"), "yo");
    EXPECT_EQ(code_of([] { (void)TeacherClient::parse_reply("{}"); }), Errc::MalformedRecord);
    const auto body = TeacherClient::request_body("m", "q", {0xff, 0x00});
    EXPECT_EQ(body["messages"][0]["content"][1]["data"], "/wA=");
    EXPECT_EQ(base64_encode({'M', 'a'}), "TWE=");
    EXPECT_EQ(sha256_hex({}), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

namespace {

// Local chat-completion stub: fails `failures` times with HTTP 500, then answers.
struct StubServer {
    httplib::Server server;
    std::thread thread;
    int port = 0;
    std::atomic<int> calls{0};
    std::string last_auth;

    StubServer(int failures, int delay_ms = 0) {
        server.Post("/v1/chat/completions", [this, failures, delay_ms](const httplib::Request& req, httplib::Response& res) {
            const int n = calls++;
            last_auth = req.get_header_value("Authorization");
            if (delay_ms) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
            if (n < failures) {
                res.status = 500;
                return;
            }
            res.set_content(R"({"choices":[{"message":{"content":"stub answer"}}]})", "application/json");
        });
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~StubServer() {
        server.stop();
        thread.join();
    }
    TeacherConfig config() const {
        TeacherConfig cfg;
        cfg.mode = TeacherConfig::Mode::live;
        cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
        cfg.backoff_s = 0.01;
        cfg.api_key_env = "MAEMI_TEST_KEY";
        return cfg;
    }
};

std::vector<std::uint8_t> tiny_ppm() {
    RawImage img;
    img.height = img.width = 2;
    img.values.assign(12, 7.f);
    return encode_ppm(img);
}

}  // namespace

TEST(Teacher, RetriesServerErrors) {
    ::setenv("MAEMI_TEST_KEY", "k123", 1);
    StubServer stub(2);
    TeacherClient client(stub.config());
    EXPECT_EQ(client.request_qa(tiny_ppm(), "what is it?"), "stub answer");
    EXPECT_EQ(stub.calls.load(), 3);
    EXPECT_EQ(client.total_retries(), 2);
    EXPECT_EQ(stub.last_auth, "Bearer k123");
}

TEST(Teacher, GivesUpAfterMaxRetries) {
    ::setenv("MAEMI_TEST_KEY", "k123", 1);
    StubServer stub(100);
    auto cfg = stub.config();
    cfg.max_retries = 2;
    TeacherClient client(cfg);
    EXPECT_EQ(code_of([&] { (void)client.request_qa(tiny_ppm(), "q?"); }), Errc::HttpStatus);
    EXPECT_EQ(stub.calls.load(), 3);
}

TEST(Teacher, TimeoutAndMissingKey) {
    StubServer stub(0, 600);
    auto cfg = stub.config();
    cfg.timeout_s = 0.2;
    cfg.max_retries = 0;
    ::setenv("MAEMI_TEST_KEY", "k", 1);
    TeacherClient slow(cfg);
    EXPECT_EQ(code_of([&] { (void)slow.request_qa(tiny_ppm(), "q?"); }), Errc::Timeout);
    ::unsetenv("MAEMI_TEST_KEY");
    TeacherClient nokey(stub.config());
    EXPECT_EQ(code_of([&] { (void)nokey.request_qa(tiny_ppm(), "q?"); }), Errc::MissingApiKey);
}

TEST(FewShot, StrategiesMatchBruteForce) {
    std::mt19937 g(5);
    std::normal_distribution<float> n;
    const std::size_t rows = 30, dim = 6;
    Tensor<float> corpus({rows, dim});
    for (auto& v : corpus.values()) v = n(g);
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < rows; ++i) labels.push_back("c" + std::to_string(i % 3));
    std::vector<float> q(corpus.values().begin() + 4 * dim, corpus.values().begin() + 5 * dim);
    const std::size_t self = 4;
    const std::string lab = labels[self];

    std::vector<std::size_t> all, same, other;
    for (std::size_t i = 0; i < rows; ++i) {
        if (i == self) continue;
        all.push_back(i);
        (labels[i] == lab ? same : other).push_back(i);
    }
    const std::span<const float> qs(q);
    EXPECT_EQ(select_few_shot(qs, corpus, 5, self), brute_rank(q, corpus, all, 5, false));
    EXPECT_EQ(select_intra_dissimilar(qs, lab, corpus, labels, 4, self), brute_rank(q, corpus, same, 4, true));
    EXPECT_EQ(select_inter_similar(qs, lab, corpus, labels, 4, self), brute_rank(q, corpus, other, 4, false));
    for (auto i : select_intra_dissimilar(qs, lab, corpus, labels, 9, self)) EXPECT_EQ(labels[i], lab);
    for (auto i : select_inter_similar(qs, lab, corpus, labels, 9, self)) EXPECT_NE(labels[i], lab);

    EXPECT_EQ(code_of([&] { (void)select_intra_dissimilar(qs, lab, corpus, labels, 10, self); }), Errc::KTooLarge);
    EXPECT_EQ(code_of([&] { (void)select_inter_similar(qs, "", corpus, labels, 1); }), Errc::MissingLabels);
    auto short_labels = labels;
    short_labels.pop_back();
    EXPECT_EQ(code_of([&] { (void)select_inter_similar(qs, lab, corpus, short_labels, 1); }), Errc::MissingLabels);
}
