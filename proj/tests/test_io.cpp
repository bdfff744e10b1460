#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "tilenorm/io.hpp"

using namespace tilenorm;
namespace fs = std::filesystem;

namespace {

const fs::path kData = TILENORM_TEST_DATA;

class TempDir {
  public:
    TempDir() {
        path_ = fs::temp_directory_path() /
                ("tilenorm_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                 ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

  private:
    fs::path path_;
};

ModelConfig micro() {
    ModelConfig c;
    c.features = {2, 3, 4};
    c.norm_kind = NormKind::BatchRenorm;
    c.seed = 17;
    return c;
}

}  // namespace

// Reference file written by numpy.save(np.arange(6.0).reshape(2, 3)).
TEST(Npy, GoldenBytes) {
    Tensor t({2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
    const std::string want = read_file(kData / "golden_2x3_f8.npy");
    EXPECT_EQ(npy_bytes(t), want);
    EXPECT_EQ(want.size(), 128u + 48u);
    EXPECT_TRUE(parse_npy(want) == t);
}

TEST(Npy, HeaderLayout) {
    const std::string h = npy_header({5}, DType::F8);
    EXPECT_EQ(h.size() % 64, 0u);
    EXPECT_NE(h.find("'shape': (5,)"), std::string::npos);
    EXPECT_EQ(h.back(), '\n');
    EXPECT_NE(npy_header({2, 3, 4}, DType::F4).find("'descr': '<f4'"), std::string::npos);
}

TEST(Npy, RoundTripBothWidths) {
    TempDir dir;
    Prng r(1);
    Tensor t({3, 1, 4, 2});
    for (auto& v : t.vec()) v = r.normal();
    write_npy(dir.path() / "a.npy", t);
    EXPECT_TRUE(read_npy(dir.path() / "a.npy") == t);
    write_npy(dir.path() / "b.npy", t, DType::F4);
    const Tensor f = read_npy(dir.path() / "b.npy");
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(f[i], static_cast<double>(static_cast<float>(t[i])));
}

TEST(Npy, Float32FileUpcasts) {
    const Tensor t = read_npy(kData / "values_f4.npy");
    EXPECT_EQ(t.shape(), (Shape{2, 2}));
    EXPECT_EQ(t[0], 0.5);
    EXPECT_EQ(t[1], -1.25);
    EXPECT_EQ(t[2], 3.0);
    EXPECT_EQ(t[3], 0.0010000000474974513);
}

TEST(Npy, RejectsFortranOrder) {
    EXPECT_THROW(read_npy(kData / "fortran_2x3_f8.npy"), FortranOrderError);
}

TEST(Npy, MalformedInputs) {
    const std::string good = npy_bytes(Tensor({2, 3}, 1.0));
    EXPECT_THROW(parse_npy("hello"), FormatError);
    EXPECT_THROW(parse_npy(good.substr(0, good.size() - 1)), FormatError);
    EXPECT_THROW(parse_npy(good.substr(0, 40)), FormatError);
    std::string v2 = good;
    v2[6] = 2;
    EXPECT_THROW(parse_npy(v2), FormatError);
    std::string i8 = good;
    i8.replace(i8.find("<f8"), 3, "<i8");
    EXPECT_THROW(parse_npy(i8), FormatError);
    std::string scalar = good;
    scalar.replace(scalar.find("(2, 3)"), 6, "()    ");
    EXPECT_THROW(parse_npy(scalar), FormatError);
    EXPECT_THROW(read_npy("/nonexistent/file.npy"), std::runtime_error);
}

TEST(Checkpoint, RoundTripRestoresEverything) {
    TempDir dir;
    Model m = build(micro());
    m.step_count = 42;
    for (NormState* st : m.norm_states()) {
        st->running_mean.assign(st->channels(), 0.25);
        st->r_max = 2.5;
        st->step_count = 7;
    }
    save_checkpoint(m, dir.path());
    const Model back = load_checkpoint(dir.path());
    EXPECT_EQ(back.config(), m.config());
    EXPECT_EQ(back.step_count, 42);
    EXPECT_EQ(back.flat_parameters(), m.flat_parameters());
    for (std::size_t i = 0; i < m.norm_states().size(); ++i) {
        EXPECT_EQ(back.norm_states()[i]->running_mean, m.norm_states()[i]->running_mean);
        EXPECT_EQ(back.norm_states()[i]->running_var, m.norm_states()[i]->running_var);
        EXPECT_EQ(back.norm_states()[i]->r_max, 2.5);
        EXPECT_EQ(back.norm_states()[i]->step_count, 7);
    }
    Prng r(2);
    Tensor x({1, 1, 8, 8, 8});
    for (auto& v : x.vec()) v = r.uniform();
    EXPECT_TRUE(back.predict(x, Mode::Eval) == m.predict(x, Mode::Eval));
}

TEST(Checkpoint, WrongShapeNamesTheTensor) {
    TempDir dir;
    save_checkpoint(build(micro()), dir.path());
    write_npy(dir.path() / "head.weight.npy", Tensor({3, 2, 1, 1, 2}));
    try {
        load_checkpoint(dir.path());
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("head.weight"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, MissingFileNamesTheTensor) {
    TempDir dir;
    save_checkpoint(build(micro()), dir.path());
    fs::remove(dir.path() / "enc1.0.norm.running_var.npy");
    try {
        load_checkpoint(dir.path());
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("enc1.0.norm.running_var"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, ManifestErrors) {
    TempDir dir;
    save_checkpoint(build(micro()), dir.path());
    write_file(dir.path() / "manifest.json", "{not json");
    EXPECT_THROW(load_checkpoint(dir.path()), FormatError);
    write_file(dir.path() / "manifest.json", R"({"format": "other"})");
    EXPECT_THROW(load_checkpoint(dir.path()), FormatError);
}

TEST(ConfigJson, ModelConfigRoundTrip) {
    ModelConfig c = micro();
    c.final_activation = FinalActivation::None;
    c.conv_kernel = 5;
    const nlohmann::json j = c;
    EXPECT_EQ(j.at("norm_kind"), "batchrenorm");
    EXPECT_EQ(j.get<ModelConfig>(), c);
}

TEST(Reports, MismatchCsvSaysNoWhenSeamless) {
    MismatchReport r{0.0, {0.0, 0.0, 0.0}, 4, true};
    const std::string csv = to_csv(r);
    EXPECT_EQ(csv,
              "channel,tile_mismatch,max_dist,tiles_compared\n"
              "background,no,0,4\nforeground,no,0,4\nboundary,no,0,4\n");
    const nlohmann::json j = r;
    EXPECT_EQ(j.at("per_channel_mismatch")[1], "no");
    r.seamless = false;
    r.max_dist = 0.25;
    r.per_channel_mismatch = {0.0, 0.125, 0.5};
    EXPECT_NE(to_csv(r).find("boundary,0.5,0.25,4"), std::string::npos);
    EXPECT_NE(to_csv(r).find("background,0,0.25,4"), std::string::npos);
}

TEST(Reports, JsonRoundTrips) {
    TempDir dir;
    const MismatchReport m{0.125, {0.0, 0.25, 1.0}, 9, false};
    write_report(m, dir.path() / "m.json", ReportFormat::Json);
    EXPECT_EQ(read_report<MismatchReport>(dir.path() / "m.json"), m);
    const MismatchReport seamless{0.0, {0.0, 0.0}, 3, true};
    write_report(seamless, dir.path() / "s.json", ReportFormat::Json);
    EXPECT_EQ(read_report<MismatchReport>(dir.path() / "s.json"), seamless);
    const DiceReport d{{{0.9, 0.8}, {0.7, 0.6}}, {0.8, 0.7}};
    write_report(d, dir.path() / "d.json", ReportFormat::Json);
    EXPECT_EQ(read_report<DiceReport>(dir.path() / "d.json"), d);
    RFReport rf{{false, {23, 23, 23}}, Tensor(), {64, 64, 64}, 8};
    write_report(rf, dir.path() / "rf.json", ReportFormat::Json);
    EXPECT_EQ(read_report<RFReport>(dir.path() / "rf.json").trf, rf.trf);
    rf.trf = {true, {}};
    EXPECT_EQ(nlohmann::json(rf).at("trf"), "FULL_TILE");
    write_file(dir.path() / "bad.json", "[1, 2");
    EXPECT_THROW(read_report<DiceReport>(dir.path() / "bad.json"), FormatError);
}

TEST(Reports, ZeroDisparityIsWrittenAsZero) {
    const DisparityReport r{{0.0}, 0.0};
    EXPECT_EQ(to_csv(r), "volume,disparity\n0,0\nmedian,0\n");
    EXPECT_EQ(nlohmann::json(r).at("median").dump(), "0.0");
    TempDir dir;
    write_report(r, dir.path() / "z.json", ReportFormat::Json);
    EXPECT_EQ(read_report<DisparityReport>(dir.path() / "z.json"), r);
}

TEST(Reports, NumbersRoundTripExactly) {
    for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456.789, 0.0})
        EXPECT_EQ(std::stod(format_number(v)), v);
    EXPECT_EQ(format_number(0.5), "0.5");
    EXPECT_EQ(format_for("a/b.csv"), ReportFormat::Csv);
    EXPECT_EQ(format_for("a/b.json"), ReportFormat::Json);
}

TEST(Reports, TrainingLogCsv) {
    TrainingLog log;
    log.steps.push_back({0, 0.5, 1.0, 0.0, 12.3456789});
    log.steps.push_back({1, 0.25, 1.5, 2.5, 3.0});
    EXPECT_EQ(to_csv(log), "step,loss,r_max_eff,d_max_eff,wall_ms\n0,0.5,1,0,12.346\n1,0.25,1.5,2.5,3\n");
}

TEST(Reports, PgmCenterSlice) {
    TempDir dir;
    Tensor map({3, 2, 2}, std::vector<double>{9, 9, 9, 9, -1, 0, 1, 3, 7, 7, 7, 7});
    write_pgm_center_slice(dir.path() / "c.pgm", map);
    const std::string bytes = read_file(dir.path() / "c.pgm");
    EXPECT_EQ(bytes.substr(0, 11), "P5\n2 2\n255\n");
    ASSERT_EQ(bytes.size(), 15u);
    EXPECT_EQ(static_cast<unsigned char>(bytes[11]), 0);
    EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 64);
    EXPECT_EQ(static_cast<unsigned char>(bytes[14]), 255);
}
