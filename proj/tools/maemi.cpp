// SPDX-License-Identifier: Apache-2.0
//
// maemi: command-line entry point.
//
// Exit codes: 0 ok, 2 usage, 3 I/O or input data, 4 configuration,
// 5 runtime. Failures print one line:
//     error: code=<Name> exit=<n> <message>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "maemi/maemi.hpp"

namespace fs = std::filesystem;
using namespace maemi;
using Real = float;

namespace {

enum Exit { kOk = 0, kUsage = 2, kIo = 3, kConfig = 4, kRuntime = 5 };

int exit_code_for(Errc c) {
    switch (c) {
        case Errc::IoError:
        case Errc::BadMagic:
        case Errc::ShapeMismatchOnLoad:
        case Errc::MalformedRecord:
        case Errc::EmptyImageDir:
            return kIo;
        case Errc::BadConfig:
            return kConfig;
        default:
            return kRuntime;
    }
}

std::string one_line(std::string s) {
    for (char& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    return s;
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

void write_text(const fs::path& p, const std::string& s) {
    maemi::detail::write_file_bytes(p, std::vector<std::uint8_t>(s.begin(), s.end()));
}

/// Config file, then --seed, then --set overrides; echoed to stderr.
AppConfig resolve_config(const std::string& file, const std::vector<std::string>& overrides, const int64_t* seed) {
    AppConfig cfg = file.empty() ? AppConfig{} : load_config(file);
    if (seed && *seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(*seed);
    for (const auto& o : overrides) apply_override(cfg, o);
    validate_config(cfg);
    std::cerr << "# effective config\n" << dump_config(cfg) << "# end config\n";
    return cfg;
}

std::string caption_question(const CaptionModel<Real>& m) {
    return m.meta.value("caption_question", std::string("describe the image ."));
}

int resolve_rank(const CaptionModel<Real>& m, int rank) {
    const int r = rank > 0 ? rank : m.adapter_cfg.r_max;
    m.fusion.blocks().front().cross.wq().check_rank(r);
    return r;
}

std::string run_generation(const CaptionModel<Real>& m, const fs::path& image, const std::string& question,
                           int max_new, int rank, double temperature, std::uint64_t seed) {
    const Tensor<Real> states = m.vision_states(image);
    const PromptTokens p = assemble_prompt(m.vocab, "", question);
    const VisualInput<Real> vis{states, p.image_slot, {}};
    Prng prng(seed);
    const auto strategy = temperature > 0 ? DecodeStrategy::sample(temperature) : DecodeStrategy::greedy();
    return generate(m.fusion, m.vocab, p.ids, &vis, static_cast<std::size_t>(max_new), strategy, resolve_rank(m, rank), &prng);
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data, config, out, log;
    int64_t seed = -1;
    std::vector<std::string> sets;
    bool val_from_train = false;
};

int cmd_train(const TrainArgs& a) {
    AppConfig cfg = resolve_config(a.config, a.sets, &a.seed);
    const auto samples = load_dataset(a.data);
    std::vector<const InstructionSample*> tr, va;
    for (const auto& s : samples) {
        if (s.split == "train") tr.push_back(&s);
        else if (s.split == "val") va.push_back(&s);
    }
    if (tr.empty()) fail(Errc::EmptySplit, "dataset has no train records");
    if (a.val_from_train) va = tr;
    if (va.empty()) fail(Errc::EmptySplit, "dataset has no val records (use --val-from-train to validate on train)");

    std::vector<std::string> corpus{cfg.caption_question};
    for (const auto* s : tr) {
        corpus.push_back(s->question);
        corpus.push_back(s->answer);
        if (!s->category.empty()) corpus.push_back(s->category);
    }
    Vocabulary vocab = Vocabulary::build(corpus, cfg.min_freq);
    auto model = CaptionModel<Real>::init(cfg.vision, cfg.fusion, cfg.adapter, std::move(vocab), cfg.train.seed);
    if (cfg.quantize_base) model.fusion.quantize_base();
    log_line("vocab " + std::to_string(model.vocab.size()) + " tokens, " + std::to_string(tr.size()) + " train / " +
             std::to_string(va.size()) + " val records");

    std::map<std::string, std::size_t> vision_index;
    TrainingSet<Real> train_set, val_set;
    auto add = [&](TrainingSet<Real>& set, std::map<std::string, std::size_t>& idx, const InstructionSample& s) {
        const fs::path img = resolve_image_path(a.data, s.image);
        auto it = idx.find(img.string());
        if (it == idx.end()) {
            set.visions.push_back(model.vision_states(img));
            it = idx.emplace(img.string(), set.visions.size() - 1).first;
        }
        const std::string q = s.template_tag == kCaptionTag ? cfg.caption_question : s.question;
        set.examples.push_back(make_example(model.vocab, it->second, q, s.answer));
    };
    for (const auto* s : tr) add(train_set, vision_index, *s);
    std::map<std::string, std::size_t> val_index;
    for (const auto* s : va) add(val_set, val_index, *s);

    std::ofstream log_file;
    if (!a.log.empty()) {
        log_file.open(a.log, std::ios::binary | std::ios::trunc);
        if (!log_file) fail(Errc::IoError, "cannot write " + a.log);
    }
    TrainHooks<Real> hooks;
    hooks.log = a.log.empty() ? nullptr : &log_file;
    hooks.on_epoch = [](const EpochRecord& r) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "epoch %d train_loss %.5f val_loss %.5f lr %.3g%s", r.epoch, r.train_loss,
                      r.val_loss, r.lr, r.lr_halved ? " (lr halved)" : "");
        log_line(buf);
    };
    const TrainResult res = train(model.fusion, train_set, val_set, cfg.train, hooks);
    model.meta = training_metadata(cfg.train, res);
    model.meta["caption_question"] = cfg.caption_question;
    save_checkpoint(model, a.out);
    std::cout << "best_epoch " << res.best_epoch << " best_val_loss " << res.best_val << " epochs_run "
              << res.history.size() << (res.early_stopped ? " early_stopped" : "") << '\n';
    return kOk;
}

struct DatagenArgs {
    std::string images, out, mock, endpoint, config;
    int64_t seed = -1;
    std::vector<std::string> sets;
    bool both_styles = false;
    int parallel = 0;
};

int cmd_datagen(const DatagenArgs& a) {
    AppConfig cfg = resolve_config(a.config, a.sets, &a.seed);
    if (!a.mock.empty() && !a.endpoint.empty()) fail(Errc::InvalidArgument, "--mock and --endpoint are exclusive");
    if (!a.mock.empty()) {
        cfg.teacher.mode = TeacherConfig::Mode::mock;
        cfg.teacher.mock_dir = a.mock;
    } else if (!a.endpoint.empty()) {
        cfg.teacher.mode = TeacherConfig::Mode::live;
        cfg.teacher.endpoint = a.endpoint;
    }
    if (a.parallel > 0) cfg.teacher.parallel = a.parallel;
    DatagenOptions opt = cfg.datagen;
    opt.seed = cfg.train.seed;
    if (a.both_styles) opt.both_styles = true;
    TeacherClient client(cfg.teacher, log_line);
    const auto counts = generate_dataset(a.images, client, a.out, opt);
    std::cout << "images " << counts.images << " existing " << counts.existing << " generated " << counts.generated
              << " total " << counts.total;
    for (const auto& [split, n] : counts.per_split) std::cout << ' ' << split << ' ' << n;
    std::cout << " retries " << client.total_retries() << '\n';
    return kOk;
}

int cmd_eval(const std::string& pairs, const std::string& report, const std::string& table) {
    const MetricReport rep = evaluate_corpus(pairs);
    write_text(report, rep.to_json().dump(2) + "\n");
    if (!table.empty()) write_text(table, rep.to_table());
    std::cout << rep.to_table();
    return kOk;
}

struct PredictArgs {
    std::string ckpt, data, split = "test", out;
    int max_new = 48, rank = 0;
};

int cmd_predict(const PredictArgs& a) {
    const auto model = load_checkpoint<Real>(a.ckpt);
    const auto samples = load_dataset(a.data);
    std::string text;
    std::size_t n = 0;
    for (const auto& s : samples) {
        if (s.split != a.split) continue;
        const std::string q = s.template_tag == kCaptionTag ? caption_question(model) : s.question;
        const std::string out = run_generation(model, resolve_image_path(a.data, s.image), q, a.max_new, a.rank, 0.0, 0);
        text += nlohmann::json{{"id", s.id}, {"reference", s.answer}, {"candidate", out}}.dump() + "\n";
        ++n;
    }
    if (n == 0) fail(Errc::EmptySplit, "no records in split '" + a.split + "'");
    write_text(a.out, text);
    std::cout << "pairs " << n << '\n';
    return kOk;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = maemi::detail::trim(part);
        if (!part.empty()) out.push_back(part);
    }
    return out;
}

int cmd_classify(const std::string& ckpt, const std::string& image, const std::string& labels,
                 const std::string& question, int topk, int rank) {
    const auto model = load_checkpoint<Real>(ckpt);
    const auto ranked = classify(model.fusion, model.vocab, model.vision_states(image), split_csv(labels),
                                 question.empty() ? caption_question(model) : question, resolve_rank(model, rank));
    const std::size_t k = topk > 0 ? std::min<std::size_t>(static_cast<std::size_t>(topk), ranked.size()) : ranked.size();
    for (std::size_t i = 0; i < k; ++i) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6f", ranked[i].score);
        std::cout << i + 1 << '\t' << ranked[i].label << '\t' << buf << '\n';
    }
    return kOk;
}

int cmd_sample_shots(const std::string& ckpt, const std::string& image, const std::string& corpus_dir, int k,
                     const std::string& strategy, std::string label) {
    const auto model = load_checkpoint<Real>(ckpt);
    const auto entries = scan_images(corpus_dir);
    Tensor<Real> corpus({entries.size(), model.vision_cfg.dim});
    std::vector<std::string> labels;
    std::optional<std::size_t> self;
    const auto target_abs = fs::weakly_canonical(image);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const Tensor<Real> states = model.vision_states(entries[i].path);
        std::copy(states.row(0).begin(), states.row(0).end(), corpus.row(i).begin());
        labels.push_back(entries[i].category);
        if (fs::weakly_canonical(entries[i].path) == target_abs) self = i;
    }
    const Tensor<Real> target = model.vision_states(fs::path(image));
    if (label.empty()) label = self ? labels[*self] : fs::path(image).parent_path().filename().string();
    if (k < 0) fail(Errc::InvalidArgument, "--k must be >= 0");
    const auto kk = static_cast<std::size_t>(k);
    std::vector<std::size_t> picked;
    if (strategy == "topk") picked = select_few_shot<Real>(target.row(0), corpus, kk, self);
    else if (strategy == "intra") picked = select_intra_dissimilar<Real>(target.row(0), label, corpus, labels, kk, self);
    else if (strategy == "inter") picked = select_inter_similar<Real>(target.row(0), label, corpus, labels, kk, self);
    else fail(Errc::InvalidArgument, "unknown strategy '" + strategy + "' (topk|intra|inter)");
    for (std::size_t i : picked) std::cout << entries[i].path.generic_string() << '\n';
    return kOk;
}

int cmd_quantize(const std::string& in, const std::string& out) {
    auto model = load_checkpoint<Real>(in);
    const std::size_t before = base_payload_bytes(model);
    model.fusion.quantize_base();
    const std::size_t after = base_payload_bytes(model);
    save_checkpoint(model, out);
    std::cout << "base_payload_bytes " << before << " -> " << after << '\n';
    return kOk;
}

int cmd_gradcheck(int64_t seed) {
    bool ok = true;
    for (const auto& r : run_gradchecks(static_cast<std::uint64_t>(seed))) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-30s rel_err %.3e coords %4zu %s", r.name.c_str(), r.rel_error, r.coords,
                      r.passed ? "PASS" : "FAIL");
        std::cout << buf << '\n';
        ok = ok && r.passed;
    }
    return ok ? kOk : kRuntime;
}

int cmd_synth(const std::string& out, const std::string& mock, const std::string& jsonl) {
    const auto items = synthetic_corpus();
    write_synthetic_corpus(out, items);
    std::size_t written = 0;
    if (!mock.empty()) {
        std::map<std::string, const SyntheticItem*> by_rel;
        for (const auto& it : items) by_rel[it.label + "/" + it.name + ".ppm"] = &it;
        written = write_mock_answers(out, mock, [&](const ImageEntry& e, const std::string& tag, const std::string& style) {
            const auto* it = by_rel.at(e.rel);
            if (style == "short") return std::string(it->caption);
            return "regarding " + maemi::detail::trim(std::string(tag)) + " , " + it->caption;
        });
    }
    if (!jsonl.empty()) {
        std::string text;
        for (const auto& it : items) {
            InstructionSample s;
            s.id = it.label + "/" + it.name + ".ppm#caption";
            s.image = maemi::detail::path_for_record(fs::path(out) / it.label / (it.name + ".ppm"), jsonl);
            s.category = it.label;
            s.question = "describe the image .";
            s.answer = it.caption;
            s.template_tag = kCaptionTag;
            s.split = "train";
            text += s.to_json().dump() + "\n";
        }
        write_text(jsonl, text);
    }
    std::cout << "images " << items.size() << " mock_answers " << written << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"maemi: small multimodal captioning, VQA and classification for micrographs"};
    app.require_subcommand(1);

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "instruction-tune the fusion model on a dataset JSONL");
    train_cmd->add_option("--data", train_args.data, "dataset JSONL")->required();
    train_cmd->add_option("--config", train_args.config, "config file");
    train_cmd->add_option("--out", train_args.out, "checkpoint to write")->required();
    train_cmd->add_option("--seed", train_args.seed, "seed (overrides train.seed)");
    train_cmd->add_option("--log", train_args.log, "per-epoch JSONL log");
    train_cmd->add_option("--set", train_args.sets, "override section.key=value");
    train_cmd->add_flag("--val-from-train", train_args.val_from_train, "validate on the training split");

    DatagenArgs dg;
    auto* dg_cmd = app.add_subcommand("datagen", "generate instruction data with a teacher model");
    dg_cmd->add_option("--images", dg.images, "image directory")->required();
    dg_cmd->add_option("--out", dg.out, "output JSONL")->required();
    dg_cmd->add_option("--mock", dg.mock, "offline answer directory");
    dg_cmd->add_option("--endpoint", dg.endpoint, "live chat-completion endpoint URL");
    dg_cmd->add_option("--config", dg.config, "config file");
    dg_cmd->add_option("--seed", dg.seed, "split seed");
    dg_cmd->add_option("--set", dg.sets, "override section.key=value");
    dg_cmd->add_option("--parallel", dg.parallel, "max in-flight teacher requests");
    dg_cmd->add_flag("--both-styles", dg.both_styles, "also request short answers");

    std::string pairs, report, table;
    auto* eval_cmd = app.add_subcommand("eval", "score candidate/reference pairs");
    eval_cmd->add_option("--pairs", pairs, "pairs JSONL {id, reference, candidate}")->required();
    eval_cmd->add_option("--report", report, "JSON report to write")->required();
    eval_cmd->add_option("--table", table, "text table to write");

    PredictArgs pa;
    auto* predict_cmd = app.add_subcommand("predict", "generate answers for a dataset split as eval pairs");
    predict_cmd->add_option("--ckpt", pa.ckpt)->required();
    predict_cmd->add_option("--data", pa.data)->required();
    predict_cmd->add_option("--split", pa.split);
    predict_cmd->add_option("--out", pa.out)->required();
    predict_cmd->add_option("--max-new", pa.max_new);
    predict_cmd->add_option("--rank", pa.rank);

    std::string ckpt, image, question, labels, corpus, strategy = "topk", label, out, in;
    int max_new = 48, rank = 0, topk = 0, k = 4;
    double temperature = 0.0;
    int64_t seed = 0;
    auto* cap_cmd = app.add_subcommand("caption", "describe an image");
    auto* vqa_cmd = app.add_subcommand("vqa", "answer a question about an image");
    for (auto* c : {cap_cmd, vqa_cmd}) {
        c->add_option("--ckpt", ckpt)->required();
        c->add_option("--image", image)->required();
        c->add_option("--max-new", max_new);
        c->add_option("--rank", rank, "adapter rank (default r_max)");
        c->add_option("--temperature", temperature, "sample with this temperature instead of greedy");
        c->add_option("--seed", seed);
    }
    cap_cmd->add_option("--question", question);
    vqa_cmd->add_option("--question", question)->required();

    auto* cls_cmd = app.add_subcommand("classify", "rank candidate labels for an image");
    cls_cmd->add_option("--ckpt", ckpt)->required();
    cls_cmd->add_option("--image", image)->required();
    cls_cmd->add_option("--labels", labels, "comma-separated labels")->required();
    cls_cmd->add_option("--question", question);
    cls_cmd->add_option("--topk", topk);
    cls_cmd->add_option("--rank", rank);

    auto* shots_cmd = app.add_subcommand("sample-shots", "pick demonstration images by embedding similarity");
    shots_cmd->add_option("--ckpt", ckpt)->required();
    shots_cmd->add_option("--image", image)->required();
    shots_cmd->add_option("--corpus", corpus)->required();
    shots_cmd->add_option("--k", k)->required();
    shots_cmd->add_option("--strategy", strategy, "topk|intra|inter");
    shots_cmd->add_option("--label", label, "class of the target (default: its directory)");

    auto* q_cmd = app.add_subcommand("quantize", "store base weights as int8 with per-column scales");
    q_cmd->add_option("--ckpt", in)->required();
    q_cmd->add_option("--out", out)->required();

    int64_t gc_seed = 7;
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of every backward pass");
    gc_cmd->add_option("--seed", gc_seed);

    std::string synth_out, synth_mock, synth_jsonl;
    auto* synth_cmd = app.add_subcommand("synth", "write the synthetic texture corpus");
    synth_cmd->add_option("--out", synth_out, "image directory to create")->required();
    synth_cmd->add_option("--mock", synth_mock, "also write mock teacher answers here");
    synth_cmd->add_option("--captions", synth_jsonl, "also write a caption dataset JSONL");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: code=Usage exit=2 " << one_line(e.what()) << '\n';
        return kUsage;
    }

    try {
        if (*train_cmd) return cmd_train(train_args);
        if (*dg_cmd) return cmd_datagen(dg);
        if (*eval_cmd) return cmd_eval(pairs, report, table);
        if (*predict_cmd) return cmd_predict(pa);
        if (*cap_cmd || *vqa_cmd) {
            const auto model = load_checkpoint<Real>(ckpt);
            const std::string q = question.empty() ? caption_question(model) : question;
            std::cout << run_generation(model, image, q, max_new, rank, temperature, static_cast<std::uint64_t>(seed))
                      << '\n';
            return kOk;
        }
        if (*cls_cmd) return cmd_classify(ckpt, image, labels, question, topk, rank);
        if (*shots_cmd) return cmd_sample_shots(ckpt, image, corpus, k, strategy, label);
        if (*q_cmd) return cmd_quantize(in, out);
        if (*gc_cmd) return cmd_gradcheck(gc_seed);
        if (*synth_cmd) return cmd_synth(synth_out, synth_mock, synth_jsonl);
    } catch (const Error& e) {
        const int code = exit_code_for(e.code());
        std::cerr << "error: code=" << errc_name(e.code()) << " exit=" << code << ' ' << one_line(e.what()) << '\n';
        return code;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: code=IoError exit=3 " << one_line(e.what()) << '\n';
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "error: code=Internal exit=5 " << one_line(e.what()) << '\n';
        return kRuntime;
    }
    return kUsage;
}
