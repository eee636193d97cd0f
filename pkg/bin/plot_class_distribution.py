#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Copyright (c) 2024 Pyvrd developers
#
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <http://www.gnu.org/licenses/>.

"""Plot how the class cap flattens the image sampling distribution.

Draws one curve per cap: the class probabilities sorted in decreasing order,
on a logarithmic axis. Without annotations a synthetic corpus is used.

"""

import matplotlib.pyplot as plt
import numpy as np

from pyvrd.ingest import read_relations, read_vocabulary
from pyvrd.sampler import flattening_curve
from pyvrd.synthetic import generate_corpus
from pyvrd.utils import get_logger, logging_off, logging_on


def get_arguments():
    """Get the command line arguments."""
    import argparse
    parser = argparse.ArgumentParser(
        description='Plot class sampling probabilities for a set of class caps')

    parser.add_argument("--vocabulary", help="Vocabulary YAML file", default=None, type=str)
    parser.add_argument("--annotations", help="Ground-truth relation CSV", default=None, type=str)
    parser.add_argument("--caps", '-c', nargs='*',
                        help="Class caps to plot, 'inf' for the original distribution",
                        default=['inf', '3000', '1000', '100'], type=str)
    parser.add_argument("--images", help="Size of the synthetic corpus used without annotations",
                        default=500, type=int)
    parser.add_argument("--title", help="Plot title", default=None, type=str)
    parser.add_argument("-o", "--filename", help="Output plot file name", default=None, type=str)
    parser.add_argument(
        "-v", '--verbose', help="Turn logging on", action='store_true')

    return parser.parse_args()


def _parse_cap(text):
    return float('inf') if text.lower() == 'inf' else int(text)


if __name__ == "__main__":
    args = get_arguments()

    LOG = get_logger(__name__)

    if args.verbose:
        logging_on()
    else:
        logging_off()

    if args.annotations:
        if not args.vocabulary:
            raise SystemExit("--annotations needs --vocabulary")
        classes, triplet_vocab = read_vocabulary(args.vocabulary)
        annotations = read_relations(args.annotations, classes, triplet_vocab)
    else:
        annotations = generate_corpus(args.images)

    caps = [_parse_cap(cap) for cap in args.caps]
    curves = flattening_curve(annotations.image_counts, caps)
    LOG.debug("Plotting %d curves over %d classes", len(caps), curves.shape[1])

    plt.figure(figsize=(10, 5))
    ranks = np.arange(1, curves.shape[1] + 1)
    for cap, row in zip(caps, curves):
        plt.semilogy(ranks, np.ma.masked_less_equal(row, 0), label='N = {cap}'.format(cap=cap))

    plt.xlabel('Class rank')
    plt.ylabel('Sampling probability')
    plt.title(args.title or 'Class sampling probability by cap')
    plt.legend(loc='best')
    if args.filename:
        plt.savefig(args.filename)
    else:
        plt.show()
