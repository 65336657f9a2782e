#include <cbev/tensor_io.hpp>

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>

namespace cbev {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("cbev_io_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

TEST(TensorFile, HeaderLayout) {
    const std::string bytes = encode_tensor(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    ASSERT_EQ(bytes.size(), 8u + 4 * 3 + 4 * 2 + 4 * 6);
    EXPECT_EQ(bytes.substr(0, 8), "CBEVTNSR");
    auto u32 = [&](std::size_t off) {
        std::uint32_t v;
        std::memcpy(&v, bytes.data() + off, 4);
        return v;
    };
    EXPECT_EQ(u32(8), 1u);   // version
    EXPECT_EQ(u32(12), 0u);  // f32
    EXPECT_EQ(u32(16), 2u);  // ndim
    EXPECT_EQ(u32(20), 2u);
    EXPECT_EQ(u32(24), 3u);
    float first;
    std::memcpy(&first, bytes.data() + 28, 4);
    EXPECT_EQ(first, 1.0f);
}

TEST(TensorFile, RoundTripIsBitExactForRandomShapes) {
    std::mt19937 rng(42);
    std::uniform_int_distribution<int> dim(1, 6), rank(0, 4);
    std::normal_distribution<float> val(0.0f, 100.0f);
    auto dir = scratch_dir("roundtrip");
    for (int trial = 0; trial < 25; ++trial) {
        Shape s(rank(rng));
        for (auto& d : s) d = dim(rng);
        std::vector<float> data(shape_numel(s));
        for (auto& v : data) v = val(rng);
        Tensor t(s, data);
        write_tensor(dir / "t.tnsr", t);
        Tensor back = read_tensor(dir / "t.tnsr");
        ASSERT_EQ(back.shape(), s);
        EXPECT_EQ(std::memcmp(back.data().data(), data.data(), data.size() * 4), 0);
    }
}

TEST(TensorFile, RejectsCorruptInput) {
    std::string bytes = encode_tensor(Tensor({3}, {1, 2, 3}));
    EXPECT_THROW(decode_tensor(bytes.substr(0, bytes.size() - 1)), FormatError);
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_tensor(bad), FormatError);
    bad = bytes;
    bad[8] = 2;  // version
    EXPECT_THROW(decode_tensor(bad), FormatError);
    EXPECT_THROW(read_tensor("/nonexistent/file.tnsr"), FormatError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    ParamStore p;
    p["layer.weight"] = Tensor({2, 2}, {0.1f, -0.2f, 1e-30f, 3.5f}, true);
    p["layer.bias"] = Tensor({2}, {7.0f, -8.0f}, true);
    auto dir = scratch_dir("ckpt");
    save_checkpoint(dir, p);
    EXPECT_TRUE(fs::exists(dir / "checkpoint.txt"));
    ParamStore q = load_checkpoint(dir, true);
    ASSERT_EQ(q.size(), 2u);
    for (const auto& [name, t] : p) {
        ASSERT_TRUE(q.count(name));
        EXPECT_EQ(q[name].shape(), t.shape());
        EXPECT_TRUE(q[name].requires_grad());
        EXPECT_EQ(std::memcmp(q[name].data().data(), t.data().data(), t.numel() * 4), 0);
    }
}

TEST(Checkpoint, MissingManifest) { EXPECT_THROW(load_checkpoint(scratch_dir("empty")), FormatError); }

} // namespace
} // namespace cbev
