// SPDX-License-Identifier: Apache-2.0
//
// Instruction data generation: ten question templates, a teacher client
// (live chat-completion HTTP endpoint or an offline answer directory), the
// dataset builder with deterministic splits and resumable output, the JSONL
// record format, and the similarity-driven demonstration samplers.
#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "maemi/error.hpp"
#include "maemi/image.hpp"
#include "maemi/tensor.hpp"
#include "maemi/tokenizer.hpp"
#include "maemi/vision.hpp"

namespace maemi {

// ---------------------------------------------------------------------------
// Templates

struct PromptTemplate {
    std::string category;
    std::string title;
    std::string questions;
};

inline const std::array<PromptTemplate, 10>& prompt_templates() {
    static const std::array<PromptTemplate, 10> t = {{
        {"basics", "Basics",
         "What type of nanomaterial is depicted in the image? What is the scale of the image? (e.g., what does one "
         "unit of measurement represent?)"},
        {"morphology_structure", "Morphology and Structure",
         "What is the general shape or morphology of the nanomaterials in the image? Are there distinct layers, "
         "phases, or domains visible? Do the nanomaterials appear uniform in size and shape or are they varied?"},
        {"size_distribution", "Size and Distribution",
         "What is the approximate size or size range of the individual nanostructures? How are the nanomaterials "
         "distributed throughout the image? (e.g., evenly spaced, clustered, random) Is there any evidence of "
         "aggregation or bundling?"},
        {"surface", "Surface Characteristics",
         "Does the nanomaterial appear smooth, rough, or have any specific textures? Are there any visible defects, "
         "pores, or impurities on the surface?"},
        {"composition", "Composition and Elements",
         "Is there evidence of compositional variations in the image (e.g., different colors, brightness, or "
         "contrasts)? Are there any labels or markers indicating specific elements or compounds present?"},
        {"interactions_boundaries", "Interactions and Boundaries",
         "How do individual nanostructures interact with one another? (e.g., are they touching, fused, or separate?) "
         "Are there clear boundaries between different structures or phases?"},
        {"external_environment", "External Environment",
         "Is there any evidence of the nanomaterial interacting with its surrounding environment or matrix (e.g., "
         "solvents, polymers, or other materials)? Are there other structures or objects in the image that are not "
         "nanomaterials? If so, what are they?"},
        {"technique", "Image Technique and Modifications",
         "What imaging technique was used to capture this image? (e.g., SEM, TEM) Were there any post-processing or "
         "modifications made to the image (e.g., false coloring, 3D rendering)?"},
        {"functional", "Functional Features",
         "If applicable, are there any functional features visible (e.g., active sites, regions with distinct "
         "properties)? Are there dynamic processes captured in the image or is it a static representation?"},
        {"context_application", "Context and Application",
         "What is the intended application or use of the nanomaterial being depicted? Is this an experimental "
         "sample, or a theoretical or simulation-based representation?"},
    }};
    return t;
}

inline constexpr std::string_view kMaterialPlaceholder = "{material}";
inline constexpr std::string_view kTemplateHeader = "This electron micrograph shows a {material} sample.";
inline constexpr std::string_view kBrevitySuffix = " Answer concisely in one sentence.";

inline std::string render_template(const PromptTemplate& t, const std::string& material_hint) {
    const std::string hint = material_hint.empty() ? "nanomaterial" : material_hint;
    std::string header(kTemplateHeader);
    header.replace(header.find(kMaterialPlaceholder), kMaterialPlaceholder.size(), hint);
    return header + " " + t.title + ": " + t.questions;
}

/// One rendered question per template, in template order.
inline std::vector<std::string> render_templates(const std::string& material_hint) {
    std::vector<std::string> out;
    for (const auto& t : prompt_templates()) out.push_back(render_template(t, material_hint));
    return out;
}

inline bool is_template_category(const std::string& c) {
    const auto& t = prompt_templates();
    return std::any_of(t.begin(), t.end(), [&](const auto& p) { return p.category == c; });
}

/// Record tag for plain image-caption pairs; these carry no template question.
inline constexpr const char* kCaptionTag = "caption";

inline std::size_t template_index(const std::string& c) {
    const auto& t = prompt_templates();
    for (std::size_t i = 0; i < t.size(); ++i)
        if (t[i].category == c) return i;
    fail(Errc::MalformedRecord, "unknown template '" + c + "'");
}

// ---------------------------------------------------------------------------
// Hashing and encoding (OpenSSL libcrypto)

inline std::string to_hex(const unsigned char* p, std::size_t n) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (std::size_t i = 0; i < n; ++i) {
        s.push_back(digits[p[i] >> 4]);
        s.push_back(digits[p[i] & 15]);
    }
    return s;
}

inline std::string sha256_hex(const std::vector<std::uint8_t>& data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        fail(Errc::IoError, "SHA-256 digest failed");
    return to_hex(md, len);
}

inline std::string base64_encode(const std::vector<std::uint8_t>& data) {
    std::string out(4 * ((data.size() + 2) / 3) + 1, '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data.data(), static_cast<int>(data.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

/// hex(SHA-256(image bytes || 0x00 || question utf-8)).
inline std::string mock_key(const std::vector<std::uint8_t>& image, const std::string& question) {
    std::vector<std::uint8_t> buf(image);
    buf.push_back(0);
    buf.insert(buf.end(), question.begin(), question.end());
    return sha256_hex(buf);
}

// ---------------------------------------------------------------------------
// Teacher client

struct TeacherConfig {
    enum class Mode { live, mock } mode = Mode::mock;
    std::string endpoint = "http://127.0.0.1:8000/v1/chat/completions";
    std::string model = "teacher-vision";
    std::string api_key_env = "MAEMI_API_KEY";
    double timeout_s = 60.0;
    int max_retries = 3;
    double backoff_s = 1.0;  // first retry delay; doubles each attempt
    std::filesystem::path mock_dir;
    int parallel = 4;
};

class TeacherClient {
  public:
    using Logger = std::function<void(const std::string&)>;

    explicit TeacherClient(TeacherConfig cfg, Logger log = {}) : cfg_(std::move(cfg)), log_(std::move(log)) {
        require(cfg_.max_retries >= 0 && cfg_.parallel >= 1 && cfg_.timeout_s > 0, Errc::BadConfig,
                "teacher needs max_retries >= 0, parallel >= 1, timeout > 0");
        if (cfg_.mode == TeacherConfig::Mode::mock)
            require(!cfg_.mock_dir.empty(), Errc::BadConfig, "mock mode needs a mock directory");
    }

    const TeacherConfig& config() const noexcept { return cfg_; }
    int total_retries() const noexcept { return retries_.load(); }

    static nlohmann::json request_body(const std::string& model, const std::string& question,
                                       const std::vector<std::uint8_t>& image) {
        return {{"model", model},
                {"messages",
                 {{{"role", "user"},
                   {"content",
                    {{{"type", "text"}, {"text", question}},
                     {{"type", "image_base64"}, {"data", base64_encode(image)}}}}}}}};
    }

    /// First text reply from a chat-completion response body.
    static std::string parse_reply(const std::string& body) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(body);
            const auto& content = j.at("choices").at(0).at("message").at("content");
            if (content.is_string()) return content.get<std::string>();
            for (const auto& part : content)
                if (part.value("type", "") == "text") return part.at("text").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            fail(Errc::MalformedRecord, std::string("teacher reply is not a chat completion: ") + e.what());
        }
        fail(Errc::MalformedRecord, "teacher reply has no text content");
    }

    std::string request_qa(const std::vector<std::uint8_t>& image, const std::string& question) {
        require(!normalize_tokens(question).empty(), Errc::EmptyQuestion, "teacher question is empty");
        decode_image(image);  // must be decodable
        if (cfg_.mode == TeacherConfig::Mode::mock) return mock_answer(image, question);
        return live_answer(image, question);
    }

  private:
    std::string mock_answer(const std::vector<std::uint8_t>& image, const std::string& question) const {
        const std::string key = mock_key(image, question);
        const auto path = cfg_.mock_dir / (key + ".txt");
        std::ifstream in(path, std::ios::binary);
        if (!in) fail(Errc::MockMiss, "no mock answer for key " + key + " in " + cfg_.mock_dir.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    std::string live_answer(const std::vector<std::uint8_t>& image, const std::string& question) {
        const char* key = std::getenv(cfg_.api_key_env.c_str());
        if (!key || !*key) fail(Errc::MissingApiKey, "environment variable " + cfg_.api_key_env + " is not set");
        const auto [base, path] = split_url(cfg_.endpoint);
        httplib::Client cli(base);
        const auto secs = static_cast<time_t>(cfg_.timeout_s);
        const auto usecs = static_cast<time_t>((cfg_.timeout_s - static_cast<double>(secs)) * 1e6);
        cli.set_connection_timeout(secs, usecs);
        cli.set_read_timeout(secs, usecs);
        cli.set_write_timeout(secs, usecs);
        const httplib::Headers headers = {{"Authorization", std::string("Bearer ") + key}};
        const std::string body = request_body(cfg_.model, question, image).dump();

        double delay = cfg_.backoff_s;
        for (int attempt = 0;; ++attempt) {
            auto res = cli.Post(path, headers, body, "application/json");
            std::string problem;
            Errc code = Errc::HttpStatus;
            if (!res) {
                const auto err = res.error();
                code = (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read) ? Errc::Timeout
                                                                                                   : Errc::IoError;
                problem = "transport error: " + httplib::to_string(err);
            } else if (res->status >= 500) {
                problem = "HTTP " + std::to_string(res->status);
            } else if (res->status != 200) {
                fail(Errc::HttpStatus, "HTTP " + std::to_string(res->status) + " from " + cfg_.endpoint);
            } else {
                return parse_reply(res->body);
            }
            if (attempt >= cfg_.max_retries)
                fail(code, problem + " after " + std::to_string(attempt) + " retries (" + cfg_.endpoint + ")");
            ++retries_;
            if (log_) log_("teacher retry " + std::to_string(attempt + 1) + "/" + std::to_string(cfg_.max_retries) + ": " + problem);
            std::this_thread::sleep_for(std::chrono::duration<double>(delay));
            delay *= 2.0;
        }
    }

    static std::pair<std::string, std::string> split_url(const std::string& url) {
        const auto scheme = url.find("://");
        require(scheme != std::string::npos, Errc::BadConfig, "endpoint must be an absolute http(s) URL: " + url);
        const auto slash = url.find('/', scheme + 3);
        if (slash == std::string::npos) return {url, "/"};
        return {url.substr(0, slash), url.substr(slash)};
    }

    TeacherConfig cfg_;
    Logger log_;
    std::atomic<int> retries_{0};
};

// ---------------------------------------------------------------------------
// Records

struct InstructionSample {
    std::string id;
    std::string image;  // as stored; resolve with resolve_image_path
    std::string category;
    std::string question;
    std::string answer;
    std::string template_tag;
    std::string split;
    std::string answer_style = "long";

    nlohmann::json to_json() const {
        nlohmann::json j{{"id", id},
                         {"image", image},
                         {"category", category},
                         {"question", question},
                         {"answer", answer},
                         {"template", template_tag},
                         {"split", split},
                         {"answer_style", answer_style}};
        return j;
    }
};

/// Relative image paths are taken relative to the dataset file's directory.
inline std::filesystem::path resolve_image_path(const std::filesystem::path& dataset, const std::string& image) {
    std::filesystem::path p(image);
    if (p.is_absolute()) return p;
    return dataset.parent_path() / p;
}

inline InstructionSample parse_sample(const std::string& line, std::size_t lineno) {
    const std::string where = "line " + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
        fail(Errc::MalformedRecord, where + "not valid JSON");
    }
    if (!j.is_object()) fail(Errc::MalformedRecord, where + "expected an object");
    auto str = [&](const char* key, bool required) -> std::string {
        auto it = j.find(key);
        if (it == j.end() || it->is_null()) {
            if (required) fail(Errc::MalformedRecord, where + "missing field '" + key + "'");
            return {};
        }
        if (!it->is_string()) fail(Errc::MalformedRecord, where + "field '" + key + "' must be a string");
        return it->get<std::string>();
    };
    InstructionSample s;
    s.id = str("id", true);
    s.image = str("image", true);
    s.category = str("category", false);
    s.question = str("question", true);
    s.answer = str("answer", true);
    s.template_tag = str("template", true);
    s.split = str("split", true);
    s.answer_style = str("answer_style", true);
    if (s.id.empty() || s.image.empty()) fail(Errc::MalformedRecord, where + "id and image must be nonempty");
    if (normalize_tokens(s.question).empty()) fail(Errc::MalformedRecord, where + "question is empty");
    if (normalize_tokens(s.answer).empty()) fail(Errc::MalformedRecord, where + "answer is empty");
    if (s.template_tag != kCaptionTag && !is_template_category(s.template_tag)) fail(Errc::MalformedRecord, where + "unknown template '" + s.template_tag + "'");
    if (s.split != "train" && s.split != "val" && s.split != "test")
        fail(Errc::MalformedRecord, where + "split must be train|val|test");
    if (s.answer_style != "short" && s.answer_style != "long")
        fail(Errc::MalformedRecord, where + "answer_style must be short|long");
    return s;
}

/// Loads and validates a dataset file. With `check_images`, every image path
/// must exist relative to the file.
inline std::vector<InstructionSample> load_dataset(const std::filesystem::path& path, bool check_images = true) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::IoError, "cannot open " + path.string());
    std::vector<InstructionSample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        InstructionSample s = parse_sample(line, lineno);
        if (check_images && !std::filesystem::exists(resolve_image_path(path, s.image)))
            fail(Errc::MalformedRecord, "line " + std::to_string(lineno) + ": image '" + s.image + "' not found");
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Splits

/// FNV-1a over "<seed>:<id>".
inline std::uint64_t split_hash(const std::string& id, std::uint64_t seed) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : std::to_string(seed) + ":" + id) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

/// Largest-remainder apportionment of n items over `fractions`; when n is at
/// least the number of positive fractions, each of those gets >= 1 item.
inline std::vector<std::size_t> split_counts(std::size_t n, const std::vector<double>& fractions) {
    require(!fractions.empty(), Errc::BadConfig, "no split fractions");
    double total = 0.0;
    for (double f : fractions) {
        require(f >= 0.0 && std::isfinite(f), Errc::BadConfig, "split fractions must be >= 0");
        total += f;
    }
    require(std::abs(total - 1.0) < 1e-9, Errc::BadConfig, "split fractions must sum to 1");
    std::vector<std::size_t> counts(fractions.size());
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        const double exact = fractions[i] * static_cast<double>(n);
        counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        assigned += counts[i];
        rem.push_back({exact - static_cast<double>(counts[i]), i});
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[rem[k % rem.size()].second];

    std::size_t positive = 0;
    for (double f : fractions) positive += f > 0.0;
    if (n >= positive) {
        for (std::size_t i = 0; i < fractions.size(); ++i) {
            if (fractions[i] <= 0.0 || counts[i] > 0) continue;
            const auto donor = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
            --counts[donor];
            ++counts[i];
        }
    }
    return counts;
}

inline const std::array<const char*, 3> kSplitNames = {"train", "val", "test"};

/// Assigns each key to a split: keys are ordered by split_hash and the first
/// counts[0] go to train, the next counts[1] to val, the rest to test.
inline std::map<std::string, std::string> assign_splits(const std::vector<std::string>& keys,
                                                        const std::vector<double>& fractions, std::uint64_t seed) {
    require(fractions.size() == kSplitNames.size(), Errc::BadConfig, "expected train/val/test fractions");
    std::vector<std::pair<std::uint64_t, std::string>> order;
    for (const auto& k : keys) order.push_back({split_hash(k, seed), k});
    std::sort(order.begin(), order.end());
    const auto counts = split_counts(keys.size(), fractions);
    std::map<std::string, std::string> out;
    std::size_t pos = 0;
    for (std::size_t s = 0; s < counts.size(); ++s)
        for (std::size_t c = 0; c < counts[s]; ++c) out[order[pos++].second] = kSplitNames[s];
    return out;
}

// ---------------------------------------------------------------------------
// Dataset generation

struct ImageEntry {
    std::filesystem::path path;
    std::string rel;       // generic path relative to the image directory
    std::string category;  // parent directory name, empty at top level
};

inline std::vector<ImageEntry> scan_images(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) fail(Errc::IoError, "image directory " + dir.string() + " does not exist");
    std::vector<ImageEntry> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file() || !is_image_file(e.path())) continue;
        ImageEntry img;
        img.path = e.path();
        const auto rel = std::filesystem::relative(e.path(), dir);
        img.rel = rel.generic_string();
        if (rel.has_parent_path()) img.category = rel.parent_path().filename().string();
        out.push_back(std::move(img));
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.rel < b.rel; });
    if (out.empty()) fail(Errc::EmptyImageDir, "no .ppm/.mraw images under " + dir.string());
    return out;
}

struct DatagenOptions {
    std::vector<double> fractions = {0.8, 0.1, 0.1};
    std::uint64_t seed = 0;
    bool both_styles = false;
};

struct DatagenCounts {
    std::size_t images = 0;
    std::size_t existing = 0;
    std::size_t generated = 0;
    std::size_t total = 0;
    std::map<std::string, std::size_t> per_split;
};

namespace detail {

inline std::string record_id(const std::string& rel, const std::string& tag, const std::string& style) {
    return rel + "#" + tag + (style == "short" ? "#short" : "");
}

inline std::string path_for_record(const std::filesystem::path& image, const std::filesystem::path& out_file) {
    const auto base = out_file.parent_path().empty() ? std::filesystem::path(".") : out_file.parent_path();
    const auto rel = std::filesystem::relative(std::filesystem::absolute(image), std::filesystem::absolute(base));
    return rel.empty() ? image.generic_string() : rel.generic_string();
}

}  // namespace detail

/// Generates one answer per (image, template [, style]) into `out_file`.
/// Existing valid records are kept and not regenerated; each finished answer
/// is appended immediately, and the file is rewritten sorted by (image,
/// template, style) at the end.
inline DatagenCounts generate_dataset(const std::filesystem::path& image_dir, TeacherClient& client,
                                      const std::filesystem::path& out_file, const DatagenOptions& opt = {}) {
    const auto images = scan_images(image_dir);
    std::vector<std::string> keys;
    for (const auto& im : images) keys.push_back(im.rel);
    const auto splits = assign_splits(keys, opt.fractions, opt.seed);

    std::map<std::string, InstructionSample> records;
    if (std::filesystem::exists(out_file)) {
        for (auto& s : load_dataset(out_file, false)) records.emplace(s.id, std::move(s));
    }
    DatagenCounts counts;
    counts.images = images.size();
    counts.existing = records.size();

    struct Job {
        const ImageEntry* image;
        std::size_t tmpl;
        std::string style;
    };
    std::vector<Job> jobs;
    const std::vector<std::string> styles = opt.both_styles ? std::vector<std::string>{"long", "short"}
                                                            : std::vector<std::string>{"long"};
    for (const auto& im : images)
        for (std::size_t t = 0; t < prompt_templates().size(); ++t)
            for (const auto& st : styles)
                if (!records.count(detail::record_id(im.rel, prompt_templates()[t].category, st))) jobs.push_back({&im, t, st});

    std::mutex mu;
    std::ofstream append;
    if (!jobs.empty()) {
        if (!out_file.parent_path().empty()) std::filesystem::create_directories(out_file.parent_path());
        append.open(out_file, std::ios::binary | std::ios::app);
        if (!append) fail(Errc::IoError, "cannot write " + out_file.string());
    }
    std::atomic<std::size_t> next{0};
    std::optional<Error> first_error;
    auto worker = [&] {
        for (;;) {
            const std::size_t k = next++;
            if (k >= jobs.size()) return;
            {
                std::lock_guard<std::mutex> lock(mu);
                if (first_error) return;
            }
            const Job& job = jobs[k];
            try {
                const auto bytes = detail::read_file_bytes(job.image->path);
                const auto& tmpl = prompt_templates()[job.tmpl];
                const std::string hint = job.image->category.empty() ? "nanomaterial" : job.image->category;
                std::string question = render_template(tmpl, hint);
                const std::string asked = job.style == "short" ? question + std::string(kBrevitySuffix) : question;
                InstructionSample s;
                s.answer = client.request_qa(bytes, asked);
                s.question = asked;
                s.id = detail::record_id(job.image->rel, tmpl.category, job.style);
                s.image = detail::path_for_record(job.image->path, out_file);
                s.category = job.image->category;
                s.template_tag = tmpl.category;
                s.split = splits.at(job.image->rel);
                s.answer_style = job.style;
                if (normalize_tokens(s.answer).empty()) fail(Errc::MalformedRecord, "teacher returned an empty answer for " + s.id);
                std::lock_guard<std::mutex> lock(mu);
                append << s.to_json().dump() << '\n';
                append.flush();
                records.emplace(s.id, std::move(s));
            } catch (const Error& e) {
                std::lock_guard<std::mutex> lock(mu);
                if (!first_error) first_error = e;
                return;
            }
        }
    };
    const std::size_t nthreads = std::min<std::size_t>(static_cast<std::size_t>(client.config().parallel), jobs.size());
    if (nthreads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < nthreads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (append.is_open()) append.close();
    if (first_error) throw *first_error;
    counts.generated = jobs.size();

    std::vector<const InstructionSample*> sorted;
    for (const auto& [id, s] : records) sorted.push_back(&s);
    std::sort(sorted.begin(), sorted.end(), [](const InstructionSample* a, const InstructionSample* b) {
        const auto ka = std::make_tuple(a->id.substr(0, a->id.find('#')), template_index(a->template_tag), a->answer_style);
        const auto kb = std::make_tuple(b->id.substr(0, b->id.find('#')), template_index(b->template_tag), b->answer_style);
        return ka < kb;
    });
    std::string text;
    for (const auto* s : sorted) {
        text += s->to_json().dump() + "\n";
        ++counts.per_split[s->split];
    }
    counts.total = sorted.size();
    // Rewrite only when the content changed, so a complete file stays untouched.
    std::string current;
    if (std::filesystem::exists(out_file)) {
        const auto b = detail::read_file_bytes(out_file);
        current.assign(b.begin(), b.end());
    }
    if (current != text) detail::write_file_bytes(out_file, std::vector<std::uint8_t>(text.begin(), text.end()));
    return counts;
}

/// Writes mock answers for every (image, template [, style]) under
/// `image_dir`, using `answer(image, template category, style)`.
inline std::size_t write_mock_answers(
    const std::filesystem::path& image_dir, const std::filesystem::path& mock_dir,
    const std::function<std::string(const ImageEntry&, const std::string&, const std::string&)>& answer,
    bool both_styles = false) {
    std::filesystem::create_directories(mock_dir);
    std::size_t n = 0;
    for (const auto& im : scan_images(image_dir)) {
        const auto bytes = detail::read_file_bytes(im.path);
        const std::string hint = im.category.empty() ? "nanomaterial" : im.category;
        for (const auto& t : prompt_templates()) {
            for (const char* style : {"long", "short"}) {
                if (std::string_view(style) == "short" && !both_styles) continue;
                std::string q = render_template(t, hint);
                if (std::string_view(style) == "short") q += kBrevitySuffix;
                const std::string a = answer(im, t.category, style);
                detail::write_file_bytes(mock_dir / (mock_key(bytes, q) + ".txt"), std::vector<std::uint8_t>(a.begin(), a.end()));
                ++n;
            }
        }
    }
    return n;
}

// ---------------------------------------------------------------------------
// Demonstration sampling over classification-token embeddings

/// Top-K most similar corpus rows; `exclude` (the target itself) is skipped.
template <class T>
std::vector<std::size_t> select_few_shot(std::span<const T> target, const Tensor<T>& corpus, std::size_t k,
                                         std::optional<std::size_t> exclude = std::nullopt) {
    const auto sims = cosine_similarities(target, corpus);
    std::vector<std::size_t> cand;
    for (std::size_t i = 0; i < corpus.rows(); ++i)
        if (!exclude || *exclude != i) cand.push_back(i);
    return rank_by_similarity(sims, std::move(cand), k);
}

namespace detail {

template <class T>
std::vector<std::size_t> class_filtered(std::span<const T> target, const std::string& target_label, const Tensor<T>& corpus,
                                        const std::vector<std::string>& labels, std::size_t k,
                                        std::optional<std::size_t> exclude, bool same_class, bool ascending) {
    require(!target_label.empty(), Errc::MissingLabels, "target has no class label");
    require(labels.size() == corpus.rows(), Errc::MissingLabels,
            "need one label per corpus row (" + std::to_string(labels.size()) + " vs " + std::to_string(corpus.rows()) + ")");
    for (std::size_t i = 0; i < labels.size(); ++i)
        require(!labels[i].empty(), Errc::MissingLabels, "corpus row " + std::to_string(i) + " has no label");
    const auto sims = cosine_similarities(target, corpus);
    std::vector<std::size_t> cand;
    for (std::size_t i = 0; i < corpus.rows(); ++i) {
        if (exclude && *exclude == i) continue;
        if ((labels[i] == target_label) == same_class) cand.push_back(i);
    }
    return rank_by_similarity(sims, std::move(cand), k, ascending);
}

}  // namespace detail

/// K least similar rows of the target's own class.
template <class T>
std::vector<std::size_t> select_intra_dissimilar(std::span<const T> target, const std::string& target_label,
                                                 const Tensor<T>& corpus, const std::vector<std::string>& labels,
                                                 std::size_t k, std::optional<std::size_t> exclude = std::nullopt) {
    return detail::class_filtered(target, target_label, corpus, labels, k, exclude, true, true);
}

/// K most similar rows from the other classes.
template <class T>
std::vector<std::size_t> select_inter_similar(std::span<const T> target, const std::string& target_label,
                                              const Tensor<T>& corpus, const std::vector<std::string>& labels,
                                              std::size_t k, std::optional<std::size_t> exclude = std::nullopt) {
    return detail::class_filtered(target, target_label, corpus, labels, k, exclude, false, false);
}

}  // namespace maemi
