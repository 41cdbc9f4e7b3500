// Command-line front end: data preparation, vocabulary, training stages,
// evaluation, index building and the HTTP service.

#include <CLI11.hpp>

#include <algorithm>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "convert/faq/eval.hpp"
#include "convert/pairgen/pair_io.hpp"
#include "convert/serve/http.hpp"
#include "convert/synth/world.hpp"

namespace fs = std::filesystem;
using namespace convert;

namespace {

// Exit status: 0 success, 1 unexpected failure, 2 usage error (CLI11),
// 10 + ErrorCode for library errors.
int exit_code(ErrorCode c) { return 10 + static_cast<int>(c); }

void note(const std::string& msg) { std::cerr << msg << '\n'; }

std::vector<std::size_t> parse_sizes(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v <= 0) throw std::invalid_argument(item);
      out.push_back(std::size_t(v));
    } catch (const std::exception&) {
      fail(ErrorCode::config, "not a positive integer list: " + csv);
    }
  }
  if (out.empty()) fail(ErrorCode::config, "empty list: " + csv);
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot write " + path);
  out << text;
  if (!out) fail(ErrorCode::io, "write failed: " + path);
}

// ---- prepare ------------------------------------------------------------------

struct PrepareGeneral {
  std::string in, out;
  pairs::GeneralPairOptions opt;
  bool keep_duplicates = false;

  void run() {
    if (!fs::is_directory(in)) fail(ErrorCode::io, in + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(in)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    opt.deduplicate = !keep_duplicates;
    pairs::GeneralPairBuilder builder(opt);
    pairs::PairWriter writer(out);
    for (const auto& f : files) {
      std::ifstream file(f);
      if (!file) fail(ErrorCode::io, "cannot open " + f.string());
      std::string line;
      while (std::getline(file, line)) {
        builder.add_paragraph(line, [&](pairs::UtterancePair p) { writer.write(p); });
      }
    }
    note("files " + std::to_string(files.size()) + ", candidates " + std::to_string(builder.candidates()) +
         ", kept " + std::to_string(builder.emitted()) + ", too short " + std::to_string(builder.dropped_short()) +
         ", duplicates " + std::to_string(builder.dropped_duplicate()));
  }
};

struct PrepareConversational {
  std::string in, out;

  void run() {
    const auto ps = pairs::make_conversational_pairs(pairs::read_comments(in));
    pairs::write_pairs(out, ps);
    note("pairs " + std::to_string(ps.size()));
  }
};

// ---- vocabulary -----------------------------------------------------------------

struct VocabTrain {
  std::vector<std::string> pair_files, faq_files, answer_files, text_files;
  std::size_t size = tok::default_vocab_size;
  std::string out;

  void run() {
    tok::BpeTrainer t;
    for (const auto& f : pair_files) {
      pairs::for_each_pair(f, [&](const pairs::UtterancePair& p) {
        t.add_text(p.input);
        t.add_text(p.response);
      });
    }
    for (const auto& f : faq_files) {
      for (const auto& r : faq::read_rows(f)) t.add_text(r.question);
    }
    for (const auto& f : answer_files) {
      for (const auto& [id, a] : faq::read_answers(f)) t.add_text(a);
    }
    for (const auto& f : text_files) {
      pairs::for_each_line(f, [&](const std::string& line, std::size_t) { t.add_text(line); });
    }
    if (t.distinct_words() == 0) fail(ErrorCode::data, "no training text given");
    const auto vocab = t.train(size);
    vocab.save(out);
    note("vocabulary " + std::to_string(vocab.size()) + " tokens from " + std::to_string(t.distinct_words()) +
         " distinct words");
  }
};

// ---- model construction and training ----------------------------------------------

struct ModelShape {
  model::EncoderConfig cfg;
  std::string config_file;

  void add(CLI::App* app) {
    app->add_option("--config", config_file, "Encoder config JSON (other shape flags override it)");
    app->add_option("--embed-dim", cfg.embed_dim);
    app->add_option("--attention-dim", cfg.attention_dim);
    app->add_option("--layers", cfg.num_shared_layers);
    app->add_option("--pooling-heads", cfg.pooling_heads);
    app->add_option("--tower-layers", cfg.tower_layers);
    app->add_option("--final-dim", cfg.final_dim);
    app->add_option("--ffn-dim", cfg.ffn_hidden_dim);
    app->add_option("--dropout", cfg.dropout_rate);
    app->add_option("--max-len", cfg.max_sequence_length);
  }

  model::EncoderConfig resolve(const CLI::App* app, std::size_t vocab_size) const {
    model::EncoderConfig c;
    if (!config_file.empty()) c = nlohmann::json::parse(model::read_file(config_file)).get<model::EncoderConfig>();
    auto take = [&](const char* flag, auto& field, auto value) {
      if (app->count(flag) > 0) field = value;
    };
    take("--embed-dim", c.embed_dim, cfg.embed_dim);
    take("--attention-dim", c.attention_dim, cfg.attention_dim);
    take("--layers", c.num_shared_layers, cfg.num_shared_layers);
    take("--pooling-heads", c.pooling_heads, cfg.pooling_heads);
    take("--tower-layers", c.tower_layers, cfg.tower_layers);
    take("--final-dim", c.final_dim, cfg.final_dim);
    take("--ffn-dim", c.ffn_hidden_dim, cfg.ffn_hidden_dim);
    take("--dropout", c.dropout_rate, cfg.dropout_rate);
    take("--max-len", c.max_sequence_length, cfg.max_sequence_length);
    c.vocab_size = vocab_size;
    c.validate();
    return c;
  }
};

struct InitModel {
  std::string vocab, out;
  std::uint64_t seed = 1;
  ModelShape shape;
  CLI::App* app = nullptr;

  void run() {
    auto v = tok::BpeVocab::load(vocab);
    model::Encoder<float> e(shape.resolve(app, v.size()), v.fingerprint(), seed);
    model::save_model(out, v, e);
    note("initialized " + out);
  }
};

struct TrainOptions {
  std::optional<std::size_t> epochs, batch_size;
  std::string batch_schedule, curriculum;
  std::optional<double> lr, weight_decay;
  std::optional<std::size_t> warmup, total;
  std::optional<std::uint64_t> seed;
  bool symmetric = false;
  std::string metrics;

  void add(CLI::App* app, bool with_seed = true) {
    app->add_option("--epochs", epochs);
    app->add_option("--batch-size", batch_size, "Same K for every epoch");
    app->add_option("--batch-schedule", batch_schedule, "Comma-separated K per epoch");
    app->add_option("--curriculum", curriculum, "START,END: double K every second epoch");
    app->add_option("--lr", lr, "Peak learning rate");
    app->add_option("--weight-decay", weight_decay);
    app->add_option("--warmup-steps", warmup);
    app->add_option("--total-steps", total);
    if (with_seed) app->add_option("--seed", seed);
    app->add_flag("--symmetric-loss", symmetric, "Add the response-to-input loss term");
    app->add_option("--metrics", metrics, "Epoch metrics JSON lines (default: <ckpt-out>/metrics.jsonl)");
  }

  train::TrainConfig resolve(train::Stage stage) const {
    train::TrainConfig c = train::default_config(stage);
    if (epochs) c.epochs = *epochs;
    if (!batch_schedule.empty()) {
      c.batch_schedule = parse_sizes(batch_schedule);
      if (!epochs) c.epochs = c.batch_schedule.size();
    } else if (!curriculum.empty()) {
      const auto ends = parse_sizes(curriculum);
      if (ends.size() != 2) fail(ErrorCode::config, "--curriculum takes START,END");
      c.batch_schedule = train::curriculum_schedule(ends[0], ends[1], c.epochs);
    } else if (batch_size) {
      c.batch_schedule.assign(c.epochs, *batch_size);
    } else if (c.batch_schedule.size() != c.epochs) {
      // Keep the stage's K, stretched or cut to the requested epochs.
      const std::size_t last = c.batch_schedule.back();
      c.batch_schedule.resize(c.epochs, last);
    }
    if (lr) c.peak_lr = *lr;
    if (weight_decay) c.weight_decay = *weight_decay;
    if (warmup) c.warmup_steps = *warmup;
    if (total) c.total_steps = *total;
    if (seed) c.seed = *seed;
    c.symmetric_loss = symmetric;
    c.validate();
    return c;
  }
};

train::StageHooks stage_hooks(const TrainOptions& t, const std::string& out_dir, const tok::BpeVocab& vocab) {
  fs::create_directories(out_dir);
  train::StageHooks h;
  h.metrics_path = t.metrics.empty() ? (fs::path(out_dir) / "metrics.jsonl").string() : t.metrics;
  h.diagnostics_path = (fs::path(out_dir) / "diagnostics.json").string();
  h.on_epoch = [&vocab, out_dir](const train::EpochMetrics& m, const model::Encoder<float>& e) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %zu  step %zu  K %zu  lr %.3g  loss %.4f  acc %.3f", m.epoch, m.step,
                  m.batch_size, m.lr, m.loss, m.in_batch_acc);
    note(buf);
    model::save_model(out_dir, vocab, e);  // last completed epoch survives an interruption
  };
  return h;
}

struct PretrainStage {
  train::Stage stage;
  std::string pairs_file, ckpt_in, vocab, out;
  std::uint64_t init_seed = 1;
  ModelShape shape;
  TrainOptions topt;
  CLI::App* app = nullptr;

  void run() {
    const auto data = pairs::read_pairs(pairs_file);
    model::Model m = start();
    const auto cfg = topt.resolve(stage);
    const auto result = train::run_stage(m.encoder, m.vocab, data, cfg, stage_hooks(topt, out, m.vocab));
    model::save_model(out, m.vocab, m.encoder);
    note(std::string(train::to_string(stage)) + " stage: " + std::to_string(result.steps) + " updates on " +
         std::to_string(data.size()) + " pairs -> " + out);
  }

  model::Model start() const {
    if (!ckpt_in.empty()) return model::load_model(ckpt_in);
    if (vocab.empty()) fail(ErrorCode::config, "give --ckpt-in, or --vocab to start from a fresh model");
    auto v = tok::BpeVocab::load(vocab);
    model::Encoder<float> e(shape.resolve(app, v.size()), v.fingerprint(), init_seed);
    return model::make_model(std::move(v), std::move(e));
  }
};

struct Finetune {
  std::string faq_file, answers_file, ckpt_in, out;
  TrainOptions topt;

  void run() {
    const auto ds = faq::load_dataset(faq_file, answers_file);
    model::Model m = model::load_model(ckpt_in);
    const auto cfg = topt.resolve(train::Stage::finetune);
    const auto result =
        train::finetune_faq(m.encoder, m.vocab, ds.rows, ds.answers, cfg, stage_hooks(topt, out, m.vocab));
    model::save_model(out, m.vocab, m.encoder);
    note("fine-tuned: " + std::to_string(result.steps) + " updates on " + std::to_string(ds.rows.size()) +
         " questions -> " + out);
  }
};

// ---- evaluation ---------------------------------------------------------------

struct Evaluate {
  std::string faq_file, answers_file;
  std::vector<std::string> ckpts;
  std::string splits = "1,2,4,6,8,10";
  std::uint64_t seed = 0;
  std::string match = "answers";
  bool no_baseline = false;
  std::string csv_out, json_out;
  TrainOptions topt;

  void run() {
    const auto ds = faq::load_dataset(faq_file, answers_file);
    faq::ExperimentConfig cfg;
    cfg.seed = seed;
    cfg.splits = parse_sizes(splits);
    cfg.finetune = topt.resolve(train::Stage::finetune);
    if (match == "questions") {
      cfg.target = faq::MatchTarget::training_question;
    } else if (match != "answers") {
      fail(ErrorCode::config, "--match is answers or questions");
    }
    std::map<std::string, std::string> dirs;
    cfg.variants.clear();
    if (!no_baseline) cfg.variants.push_back("baseline");
    for (const auto& c : ckpts) {
      const auto eq = c.find('=');
      const std::string variant = eq == std::string::npos ? "general+conversational" : c.substr(0, eq);
      dirs[variant] = eq == std::string::npos ? c : c.substr(eq + 1);
    }
    // Rows follow the canonical order regardless of flag order.
    for (const auto& v : faq::known_variants()) {
      if (v != "baseline" && dirs.contains(v)) cfg.variants.push_back(v);
    }
    for (const auto& [v, d] : dirs) {
      if (std::find(cfg.variants.begin(), cfg.variants.end(), v) == cfg.variants.end()) {
        fail(ErrorCode::config, "unknown variant '" + v + "'");
      }
    }
    if (cfg.variants.empty()) fail(ErrorCode::config, "nothing to evaluate");
    const auto result = faq::run_experiment(ds, dirs, cfg, [](const std::string& v, std::size_t k, double acc) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%-24s split %2zu  acc@1 %.3f", v.c_str(), k, acc);
      note(buf);
    });
    const std::string csv = faq::results_csv(result);
    std::cout << csv;
    if (!csv_out.empty()) write_text(csv_out, csv);
    if (!json_out.empty()) write_text(json_out, faq::results_json(result).dump(2) + "\n");
  }
};

// ---- serving ------------------------------------------------------------------

struct IndexBuild {
  std::string ckpt, answers_file, out;

  void run() {
    const auto m = model::load_model(ckpt);
    const auto index = serve::build_index(m, faq::read_answers(answers_file));
    const std::string path = out.empty() ? (fs::path(ckpt) / "answers.index").string() : out;
    serve::save_index(index, path);
    note("indexed " + std::to_string(index.size()) + " answers -> " + path);
  }
};

httplib::Server* running_server = nullptr;

struct Serve {
  std::string ckpt, answers_file, index_file, feedback_file, host = "127.0.0.1";
  int port = 8080;
  serve::ServiceOptions opt;
  std::optional<float> min_score;

  void run() {
    auto m = model::load_model(ckpt);
    auto answers = faq::read_answers(answers_file);
    serve::AnswerIndex index;
    if (!index_file.empty()) {
      index = serve::load_index(index_file);
      serve::check_fresh(index, m, answers);
    } else {
      index = serve::build_index(m, answers);
    }
    opt.min_score = min_score;
    const std::string log = feedback_file.empty() ? (fs::path(ckpt) / "feedback.jsonl").string() : feedback_file;
    serve::Service service(std::move(m), std::move(answers), std::move(index), log, opt);
    httplib::Server server;
    serve::mount(server, service);
    running_server = &server;
    std::signal(SIGINT, [](int) {
      if (running_server) running_server->stop();
    });
    std::signal(SIGTERM, [](int) {
      if (running_server) running_server->stop();
    });
    if (!server.bind_to_port(host, port)) fail(ErrorCode::io, "cannot bind " + host + ":" + std::to_string(port));
    note("serving " + std::to_string(service.health()["num_answers"].get<std::size_t>()) + " answers on http://" +
         host + ":" + std::to_string(port) + " (feedback -> " + log + ")");
    server.listen_after_bind();
    running_server = nullptr;
  }
};

struct FeedbackExport {
  std::string log, out, answers_file;

  void run() {
    const auto records = serve::read_feedback(log);
    const auto rows = serve::export_accepted(records);
    if (!answers_file.empty()) faq::check_answers_exist(rows, faq::read_answers(answers_file));
    faq::write_rows(out, rows);
    note(std::to_string(rows.size()) + " accepted of " + std::to_string(records.size()) + " records -> " + out);
  }
};

// ---- synthetic demo data --------------------------------------------------------

struct Synth {
  std::string out;
  std::size_t paragraphs = 10000, threads = 2500;
  synth::WorldConfig world;

  void run() {
    const synth::World w(world);
    fs::create_directories(fs::path(out) / "general");
    {
      std::ofstream f(fs::path(out) / "general" / "paragraphs.txt", std::ios::binary);
      for (const auto& p : w.paragraphs(paragraphs, 6, world.seed + 1)) f << p << '\n';
      if (!f) fail(ErrorCode::io, "write failed in " + out);
    }
    {
      std::ofstream f(fs::path(out) / "comments.jsonl", std::ios::binary);
      for (const auto& n : w.threads(threads, world.seed + 2)) {
        nlohmann::json j{{"id", n.id}, {"body", n.body}};
        j["parent_id"] = n.parent_id ? nlohmann::json(*n.parent_id) : nlohmann::json(nullptr);
        f << j.dump() << '\n';
      }
      if (!f) fail(ErrorCode::io, "write failed in " + out);
    }
    const auto ds = w.faq(world.seed + 3);
    faq::write_rows((fs::path(out) / "faq.jsonl").string(), ds.rows);
    faq::write_answers((fs::path(out) / "answers.jsonl").string(), ds.answers);
    note("wrote general/paragraphs.txt, comments.jsonl, faq.jsonl, answers.jsonl under " + out);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-encoder FAQ retrieval: pre-training, fine-tuning, evaluation and serving"};
  app.require_subcommand(1);
  std::function<void()> action;
  auto bind = [&](CLI::App* sub, auto& cmd) { sub->callback([&] { action = [&] { cmd.run(); }; }); };

  auto* prepare = app.add_subcommand("prepare", "Build training pairs from raw text")->require_subcommand(1);
  PrepareGeneral pg;
  auto* pg_app = prepare->add_subcommand("general", "Adjacent-sentence pairs from paragraph files");
  pg_app->add_option("--in", pg.in, "Directory of UTF-8 files, one paragraph per line")->required();
  pg_app->add_option("--out", pg.out, "Output pairs (JSON lines)")->required();
  pg_app->add_option("--min-chars", pg.opt.min_chars, "Minimum combined length in code points");
  pg_app->add_flag("--per-side", pg.opt.per_side, "Apply --min-chars to each side separately");
  pg_app->add_flag("--keep-duplicates", pg.keep_duplicates);
  bind(pg_app, pg);
  PrepareConversational pc;
  auto* pc_app = prepare->add_subcommand("conversational", "Parent/reply pairs from comment threads");
  pc_app->add_option("--in", pc.in, "Comments as JSON lines {id, parent_id, body}")->required();
  pc_app->add_option("--out", pc.out)->required();
  bind(pc_app, pc);

  auto* vocab = app.add_subcommand("vocab", "Vocabulary tools")->require_subcommand(1);
  VocabTrain vt;
  auto* vt_app = vocab->add_subcommand("train", "Learn BPE merges");
  vt_app->add_option("--pairs", vt.pair_files, "Pairs files (JSON lines)");
  vt_app->add_option("--faq", vt.faq_files, "FAQ question files");
  vt_app->add_option("--answers", vt.answer_files, "FAQ answer files");
  vt_app->add_option("--text", vt.text_files, "Plain text, one segment per line");
  vt_app->add_option("--size", vt.size, "Target vocabulary size");
  vt_app->add_option("--out", vt.out)->required();
  bind(vt_app, vt);

  InitModel init;
  auto* init_app = app.add_subcommand("init", "Randomly initialized model directory");
  init_app->add_option("--vocab", init.vocab)->required();
  init_app->add_option("--ckpt-out", init.out)->required();
  init_app->add_option("--seed", init.seed);
  init.shape.add(init_app);
  init.app = init_app;
  bind(init_app, init);

  PretrainStage general{train::Stage::general};
  PretrainStage conversational{train::Stage::conversational};
  for (auto* stage : {&general, &conversational}) {
    const bool is_general = stage == &general;
    auto* sub = app.add_subcommand(is_general ? "pretrain-general" : "pretrain-conversational",
                                   is_general ? "Train on general sentence pairs" : "Train on conversational pairs");
    sub->add_option("--pairs", stage->pairs_file)->required();
    sub->add_option("--ckpt-out", stage->out)->required();
    auto* in = sub->add_option("--ckpt-in", stage->ckpt_in, "Starting model directory");
    auto* v = sub->add_option("--vocab", stage->vocab, "Start from a fresh model over this vocabulary");
    in->excludes(v);
    if (!is_general) in->required();
    sub->add_option("--init-seed", stage->init_seed);
    stage->shape.add(sub);
    stage->topt.add(sub);
    stage->app = sub;
    bind(sub, *stage);
  }

  Finetune ft;
  auto* ft_app = app.add_subcommand("finetune", "Fine-tune on FAQ questions and answers");
  ft_app->add_option("--faq", ft.faq_file)->required();
  ft_app->add_option("--answers", ft.answers_file)->required();
  ft_app->add_option("--ckpt-in", ft.ckpt_in)->required();
  ft_app->add_option("--ckpt-out", ft.out)->required();
  ft.topt.add(ft_app);
  bind(ft_app, ft);

  Evaluate ev;
  auto* ev_app = app.add_subcommand("evaluate", "Split-k accuracy table");
  ev_app->add_option("--faq", ev.faq_file)->required();
  ev_app->add_option("--answers", ev.answers_file)->required();
  ev_app->add_option("--ckpt", ev.ckpts, "VARIANT=DIR, repeatable; a bare DIR is general+conversational");
  ev_app->add_option("--splits", ev.splits);
  ev_app->add_option("--seed", ev.seed);
  ev_app->add_option("--match", ev.match, "answers (default) or questions");
  ev_app->add_flag("--no-baseline", ev.no_baseline, "Skip the TF-IDF row");
  ev_app->add_option("--csv", ev.csv_out, "Also write the table here");
  ev_app->add_option("--report", ev.json_out, "Per-question predictions (JSON)");
  ev.topt.add(ev_app, false);  // --seed above drives splits and fine-tuning
  bind(ev_app, ev);

  auto* index = app.add_subcommand("index", "Answer index tools")->require_subcommand(1);
  IndexBuild ib;
  auto* ib_app = index->add_subcommand("build", "Precompute answer embeddings");
  ib_app->add_option("--ckpt", ib.ckpt)->required();
  ib_app->add_option("--answers", ib.answers_file)->required();
  ib_app->add_option("--out", ib.out, "Default: <ckpt>/answers.index");
  bind(ib_app, ib);

  Serve sv;
  auto* sv_app = app.add_subcommand("serve", "HTTP JSON API");
  sv_app->add_option("--ckpt", sv.ckpt)->required();
  sv_app->add_option("--answers", sv.answers_file)->required();
  sv_app->add_option("--port", sv.port);
  sv_app->add_option("--host", sv.host);
  sv_app->add_option("--index", sv.index_file, "Prebuilt index; a stale one is an error");
  sv_app->add_option("--feedback", sv.feedback_file, "Feedback log (default: <ckpt>/feedback.jsonl)");
  sv_app->add_option("--top-k", sv.opt.default_top_k, "Results when a query gives no top_k");
  sv_app->add_option("--min-score", sv.min_score, "Hide answers scoring below this");
  sv_app->add_flag("--cors", sv.opt.allow_any_origin, "Allow requests from any origin");
  bind(sv_app, sv);

  auto* feedback = app.add_subcommand("feedback", "Feedback log tools")->require_subcommand(1);
  FeedbackExport fe;
  auto* fe_app = feedback->add_subcommand("export", "Accepted feedback as FAQ training rows");
  fe_app->add_option("--log", fe.log)->required();
  fe_app->add_option("--out", fe.out)->required();
  fe_app->add_option("--answers", fe.answers_file, "Check ids against this answers file");
  bind(fe_app, fe);

  Synth sy;
  auto* sy_app = app.add_subcommand("synth", "Write a synthetic demo corpus");
  sy_app->add_option("--out", sy.out)->required();
  sy_app->add_option("--paragraphs", sy.paragraphs);
  sy_app->add_option("--threads", sy.threads);
  sy_app->add_option("--topics", sy.world.topics);
  sy_app->add_option("--answers", sy.world.faq_answers);
  sy_app->add_option("--questions", sy.world.questions_per_answer);
  sy_app->add_option("--seed", sy.world.seed);
  bind(sy_app, sy);

  CLI11_PARSE(app, argc, argv);
  try {
    action();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
