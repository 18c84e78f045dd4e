#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace difftraffic {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An argument lies outside the domain of a formula (e.g. negative density).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A step would violate dt * max|lambda| <= dx.
class CflViolation : public Error {
 public:
  CflViolation(const std::string& what, double wave_speed, double limit)
      : Error(what), wave_speed_(wave_speed), limit_(limit) {}
  double wave_speed() const { return wave_speed_; }
  double limit() const { return limit_; }

 private:
  double wave_speed_;
  double limit_;
};

/// Two vehicles overlap (non-positive bumper-to-bumper gap).
class CollisionError : public Error {
 public:
  CollisionError(const std::string& what, std::uint64_t follower, std::uint64_t leader)
      : Error(what), follower_(follower), leader_(leader) {}
  std::uint64_t follower() const { return follower_; }
  std::uint64_t leader() const { return leader_; }

 private:
  std::uint64_t follower_;
  std::uint64_t leader_;
};

/// A scenario document is malformed or names an unknown entity.
class ScenarioError : public Error {
 public:
  using Error::Error;
};

/// A recorded tape does not match the state it is replayed against.
class TapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace difftraffic
