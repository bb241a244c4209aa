// qsrec: ingest, train, index, query, eval and inspect from the command line.
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qsrec/qsrec.hpp"

namespace fs = std::filesystem;
using namespace qsrec;

namespace {

struct ConfigArgs {
    std::string path;
    std::vector<std::string> overrides;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", path, "key=value config file")->check(CLI::ExistingFile);
        cmd->add_option("--set", overrides, "override one config key (key=value); repeatable")->allow_extra_args(false);
    }

    [[nodiscard]] RunConfig load() const {
        RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
        for (const auto& o : overrides) apply_assignment(cfg, o);
        cfg.validate();
        return cfg;
    }
};

fs::path train_cache(const fs::path& dir) { return dir / "train.qsc"; }
fs::path test_cache(const fs::path& dir) { return dir / "test.qsc"; }

// Resolves a query token: vocabulary lookup when a corpus is given, numeric id otherwise.
std::uint32_t resolve_item(const std::string& tok, const Vocab* vocab, std::size_t vocab_size) {
    if (vocab != nullptr) {
        if (const auto id = vocab->find(tok)) return *id;
        fail(ErrorKind::kInput, "unknown item '" + tok + "'");
    }
    std::uint32_t id = 0;
    const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), id);
    require(ec == std::errc() && p == tok.data() + tok.size(), ErrorKind::kInput,
            "item '" + tok + "' is not a numeric id (pass --corpus to look up tokens)");
    require(id < vocab_size, ErrorKind::kInput, "item id " + tok + " outside vocabulary");
    return id;
}

int cmd_ingest(const std::string& input, const ConfigArgs& cargs, const fs::path& out_dir) {
    const RunConfig cfg = cargs.load();
    EventLog log = load_events(input, parse_input_format(cfg.format));
    for (const auto& w : log.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    if (cfg.fraction < 1.0) log = keep_recent_fraction(log, cfg.fraction);
    const EventSplit split =
        parse_split_method(cfg.split) == SplitMethod::kLastDay ? split_by_last_day(log) : bucket_playlists(log, cfg.seed);
    const CorpusPair pair = finalize_corpus(split.train, split.test, cfg.filter_options());
    fs::create_directories(out_dir);
    // Encode both before writing either, so a failure leaves nothing behind.
    const auto train_bytes = encode_corpus(pair.train);
    const auto test_bytes = encode_corpus(pair.test);
    io::write_file_atomic(train_cache(out_dir), train_bytes);
    io::write_file_atomic(test_cache(out_dir), test_bytes);
    std::printf("rows %zu malformed %zu\n", log.rows, log.malformed);
    std::printf("V %zu\n", pair.train.vocab.size());
    std::printf("train sessions %zu events %zu\n", pair.train.sessions.size(), pair.train.event_count());
    std::printf("test sessions %zu events %zu\n", pair.test.sessions.size(), pair.test.event_count());
    return 0;
}

template <class T>
int run_training(TrainState<T> state, const SessionCorpus& corpus, const RunConfig& cfg, const fs::path& out,
                 const std::string& trace_path) {
    const TrainConfig tc = cfg.train_config();
    std::ofstream trace;
    if (!trace_path.empty()) {
        trace.open(trace_path, state.epochs_done > 0 ? std::ios::app : std::ios::trunc);
        require(static_cast<bool>(trace), ErrorKind::kIo, "cannot open trace file " + trace_path);
    }
    const auto on_loss = [&](const LossRecord& r) {
        const std::string line = format_loss_record(r);
        if (trace.is_open()) trace << line;
        if (r.step % cfg.log_every == 0) std::fputs(line.c_str(), stdout);
    };
    if (state.epochs_done >= tc.epochs) save_checkpoint(Checkpoint::from_state(state, tc.seed), out);
    while (state.epochs_done < tc.epochs) {
        const double mean = train_epoch(state, corpus, tc, on_loss);
        std::printf("epoch %zu mean_loss %.9g\n", state.epochs_done, mean);
        std::fflush(stdout);
        save_checkpoint(Checkpoint::from_state(state, tc.seed), out);
    }
    return 0;
}

int cmd_train(const fs::path& corpus_path, const ConfigArgs& cargs, const fs::path& out, const std::string& resume,
              const std::string& trace, bool grad_check_only) {
    const RunConfig cfg = cargs.load();
    const SessionCorpus corpus = load_corpus(corpus_path);
    const ModelShape shape = cfg.shape(corpus.vocab.size());
    shape.validate();
    if (grad_check_only) {
        GradCheckOptions opts;
        opts.seed = cfg.seed;
        opts.max_batches = 2;
        const GradCheckReport rep = grad_check(Model<double>::initialized(shape, cfg.seed), corpus, opts);
        std::printf("grad-check coordinates %zu batches %zu max_rel_error %.3e worst %s[%zu] analytic %.9g numeric %.9g\n",
                    rep.coordinates, rep.batches, rep.max_rel_error, rep.worst_tensor.c_str(), rep.worst_index,
                    rep.worst_analytic, rep.worst_numeric);
        return rep.passed() ? 0 : 1;
    }
    if (!resume.empty()) {
        Checkpoint ck = load_checkpoint(resume);
        require(ck.header.shape == shape, ErrorKind::kConsistency,
                "checkpoint shape does not match the config and corpus");
        require(ck.header.has_optimizer, ErrorKind::kConsistency, "checkpoint carries no optimizer state");
        require(ck.header.seed == cfg.seed, ErrorKind::kConsistency, "checkpoint seed differs from config seed");
        require(ck.header.precision == cfg.precision, ErrorKind::kConsistency,
                "checkpoint precision differs from config precision");
        return std::visit([&](auto& s) { return run_training(std::move(s), corpus, cfg, out, trace); }, ck.state);
    }
    const TrainConfig tc = cfg.train_config();
    if (cfg.precision == 64) return run_training(init_training<double>(shape, tc), corpus, cfg, out, trace);
    return run_training(init_training<float>(shape, tc), corpus, cfg, out, trace);
}

int cmd_index(const fs::path& checkpoint, const std::string& kind, const fs::path& out) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const IndexFile file{parse_index_kind(kind), item_matrix_from_model(checkpoint_model<double>(ck))};
    save_index(file, out);
    std::printf("index %s items %zu dim %zu fingerprint %08x\n", index_kind_name(file.kind), file.items.rows(),
                file.items.dim, fingerprint(file.items));
    return 0;
}

int cmd_query(const fs::path& index_path, const fs::path& checkpoint, const std::string& corpus_path,
              const ConfigArgs& cargs, const std::vector<std::string>& tokens) {
    const RunConfig cfg = cargs.load();
    const IndexFile file = load_index(index_path);
    const Model<double> model = checkpoint_model<double>(load_checkpoint(checkpoint));
    require(model.shape().head == Head::kMatrix, ErrorKind::kInput, "query needs a matrix-head checkpoint");
    require(fingerprint(item_matrix_from_model(model)) == fingerprint(file.items), ErrorKind::kConsistency,
            "index was built from a different checkpoint");
    std::optional<SessionCorpus> corpus;
    if (!corpus_path.empty()) corpus = load_corpus(corpus_path);
    require(!tokens.empty(), ErrorKind::kInput, "query needs at least one session item");
    std::vector<std::uint32_t> items;
    for (const auto& t : tokens) items.push_back(resolve_item(t, corpus ? &corpus->vocab : nullptr, model.shape().vocab));
    const auto h = encode_session(model, std::span<const std::uint32_t>(items));
    const PackedSymMatrix a = session_matrix(std::span<const double>(h), model.shape().n);
    const TopN top = file.kind == IndexKind::kFlatten
                         ? query_flatten(FlattenIndex<>::build(file.items), a, cfg.N)
                         : query_decomposition(DecompositionIndex(file.items), a, cfg.k, cfg.N);
    for (std::size_t i = 0; i < top.size(); ++i) {
        const std::string label = corpus ? corpus->vocab.token(top[i].id) : std::to_string(top[i].id);
        std::printf("%zu\t%u\t%s\t%.9g\n", i + 1, top[i].id, label.c_str(), top[i].score);
    }
    return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& test_path, const std::string& index_path,
             const ConfigArgs& cargs, const std::string& format) {
    const RunConfig cfg = cargs.load();
    const SessionCorpus test = load_corpus(test_path);
    const Model<double> model = checkpoint_model<double>(load_checkpoint(checkpoint));
    EvalReport report;
    if (index_path.empty()) {
        report = evaluate(model, test, cfg.K);
    } else {
        IndexEvalOptions opts;
        opts.directions = cfg.k;
        opts.candidates = cfg.N;
        report = evaluate_via_index(load_index(index_path), model, test, cfg.K, opts);
    }
    const std::string text = format == "tsv" ? format_report_tsv(report) : format_report_text(report);
    std::fputs(text.c_str(), stdout);
    return 0;
}

int cmd_inspect(const std::string& checkpoint, const ConfigArgs& cargs, std::size_t vocab) {
    if (!checkpoint.empty()) {
        const Checkpoint ck = load_checkpoint(checkpoint);
        std::fputs(format_checkpoint_header(ck.header).c_str(), stdout);
        std::fputs("\n", stdout);
        std::fputs(format_parameter_table(ck.header.shape).c_str(), stdout);
        return 0;
    }
    require(vocab > 0, ErrorKind::kInput, "inspect needs --checkpoint or --vocab");
    const RunConfig cfg = cargs.load();
    std::printf("head: %s\n", cfg.head.c_str());
    std::fputs(format_parameter_table(cfg.shape(vocab)).c_str(), stdout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Session recommender with symmetric-matrix session embeddings"};
    app.require_subcommand(1);

    ConfigArgs ingest_cfg, train_cfg, query_cfg, eval_cfg, inspect_cfg;

    std::string ingest_input;
    std::string ingest_out;
    auto* ingest = app.add_subcommand("ingest", "parse events, split and write corpus caches");
    ingest->add_option("--input", ingest_input, "click CSV or playlist file")->required();
    ingest->add_option("--out-dir", ingest_out, "directory receiving train.qsc and test.qsc")->required();
    ingest_cfg.attach(ingest);

    std::string train_corpus, train_out, train_resume, train_trace;
    bool grad_check_flag = false;
    auto* train_cmd = app.add_subcommand("train", "train a model on a corpus cache");
    train_cmd->add_option("--corpus", train_corpus, "training corpus cache")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out", train_out, "checkpoint path (rewritten after every epoch)");
    train_cmd->add_option("--resume", train_resume, "continue from this checkpoint")->check(CLI::ExistingFile);
    train_cmd->add_option("--trace", train_trace, "write every step's loss to this file");
    train_cmd->add_flag("--grad-check", grad_check_flag, "compare analytic and numeric gradients, then exit");
    train_cfg.attach(train_cmd);

    std::string index_ckpt, index_kind = "flatten", index_out;
    auto* index_cmd = app.add_subcommand("index", "build a retrieval index from a matrix-head checkpoint");
    index_cmd->add_option("--checkpoint", index_ckpt)->required()->check(CLI::ExistingFile);
    index_cmd->add_option("--kind", index_kind, "flatten or decomp")->check(CLI::IsMember({"flatten", "decomp"}));
    index_cmd->add_option("--out", index_out)->required();

    std::string query_index, query_ckpt, query_corpus;
    std::vector<std::string> query_items;
    auto* query_cmd = app.add_subcommand("query", "top-N items for a session");
    query_cmd->add_option("--index", query_index)->required()->check(CLI::ExistingFile);
    query_cmd->add_option("--checkpoint", query_ckpt)->required()->check(CLI::ExistingFile);
    query_cmd->add_option("--corpus", query_corpus, "corpus cache for token lookup")->check(CLI::ExistingFile);
    query_cmd->add_option("items", query_items, "session items, oldest first")->required();
    query_cfg.attach(query_cmd);

    std::string eval_ckpt, eval_test, eval_index, eval_format = "text";
    auto* eval_cmd = app.add_subcommand("eval", "recall@K and MRR@K on a test corpus");
    eval_cmd->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--test", eval_test, "test corpus cache")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--index", eval_index, "retrieve through this index")->check(CLI::ExistingFile);
    eval_cmd->add_option("--format", eval_format)->check(CLI::IsMember({"text", "tsv"}));
    eval_cfg.attach(eval_cmd);

    std::string inspect_ckpt;
    std::size_t inspect_vocab = 0;
    auto* inspect_cmd = app.add_subcommand("inspect", "print a checkpoint header and parameter table");
    inspect_cmd->add_option("--checkpoint", inspect_ckpt)->check(CLI::ExistingFile);
    inspect_cmd->add_option("--vocab", inspect_vocab, "vocabulary size when inspecting a config shape");
    inspect_cfg.attach(inspect_cmd);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ingest) return cmd_ingest(ingest_input, ingest_cfg, ingest_out);
        if (*train_cmd) {
            require(grad_check_flag || !train_out.empty(), ErrorKind::kInput, "train needs --out");
            return cmd_train(train_corpus, train_cfg, train_out, train_resume, train_trace, grad_check_flag);
        }
        if (*index_cmd) return cmd_index(index_ckpt, index_kind, index_out);
        if (*query_cmd) return cmd_query(query_index, query_ckpt, query_corpus, query_cfg, query_items);
        if (*eval_cmd) return cmd_eval(eval_ckpt, eval_test, eval_index, eval_cfg, eval_format);
        if (*inspect_cmd) return cmd_inspect(inspect_ckpt, inspect_cfg, inspect_vocab);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "qsrec: %s\n", e.what());
        return 1;
    }
    return 2;
}
