"""Functional aliases of the tensor primitives, importable as one namespace."""

from .tensor import add, concat, exp, log, log_softmax, matmul, mean, mul, relu, softmax, stack, sum, where

__all__ = ["add", "concat", "exp", "log", "log_softmax", "matmul", "mean", "mul", "relu", "softmax", "stack", "sum", "where"]
