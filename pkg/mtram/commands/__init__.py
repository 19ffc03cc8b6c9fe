"""子命令包：每个模块提供 NAME / HELP / configure(parser) / run(args, cfg)"""
from . import ablate, evaluate, gen, pretrain, train

COMMANDS = [gen, pretrain, train, evaluate, ablate]
