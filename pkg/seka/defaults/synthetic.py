# seka: spectral key editing for attention steering.
#
# Copyright (C) 2026 The seka developers
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
# along with this program.  If not, see <https://www.gnu.org/licenses/>.
#
# Slot word banks for the deterministic synthetic contrastive samples.  The
# banks are disjoint so an object phrase never occurs inside another slot.

AGENTS = (
    "the baker", "the cartographer", "the ferryman", "the astronomer",
    "the locksmith", "the beekeeper", "the archivist", "the glassblower",
    "the shepherd", "the blacksmith", "the violinist", "the botanist",
    "the lighthouse keeper", "the tailor", "the courier", "the potter",
    "the falconer", "the librarian", "the miner", "the clockmaker",
    "the weaver", "the fisherman", "the sculptor", "the surveyor",
    "the chemist", "the innkeeper", "the diver", "the gardener",
    "the pilot", "the scribe", "the brewer", "the mason",
    "the carpenter", "the juggler", "the herbalist", "the navigator",
    "the jeweler", "the printer", "the ranger", "the saddler",
    "the chandler", "the tanner",
)

# (past tense, base form)
VERBS = (
    ("painted", "paint"), ("hid", "hide"), ("repaired", "repair"),
    ("polished", "polish"), ("carried", "carry"), ("sold", "sell"),
    ("buried", "bury"), ("inspected", "inspect"), ("wrapped", "wrap"),
    ("borrowed", "borrow"), ("measured", "measure"), ("stole", "steal"),
    ("found", "find"), ("weighed", "weigh"), ("dropped", "drop"),
    ("guarded", "guard"), ("photographed", "photograph"),
    ("cleaned", "clean"), ("delivered", "deliver"), ("traded", "trade"),
    ("sketched", "sketch"), ("lost", "lose"), ("labelled", "label"),
    ("unpacked", "unpack"), ("assembled", "assemble"),
    ("decorated", "decorate"), ("examined", "examine"),
    ("returned", "return"), ("locked", "lock"), ("hoisted", "hoist"),
    ("catalogued", "catalogue"), ("mended", "mend"), ("stacked", "stack"),
    ("lifted", "lift"), ("shipped", "ship"), ("counted", "count"),
    ("engraved", "engrave"), ("restored", "restore"), ("sorted", "sort"),
    ("displayed", "display"), ("sealed", "seal"), ("tested", "test"),
)

OBJECTS = (
    "a copper lantern", "an ivory compass", "a velvet satchel",
    "a brass telescope", "a cedar chest", "a silver kettle",
    "an amber pendant", "a woollen scarf", "a granite statue",
    "a porcelain vase", "a leather journal", "an iron anvil",
    "a crystal goblet", "a bamboo flute", "a marble chessboard",
    "a tin whistle", "a jade figurine", "a linen banner",
    "a bronze bell", "an oak barrel", "a pewter tankard",
    "a quartz prism", "a canvas tent", "a walnut cabinet",
    "a cobalt teapot", "a feather quill", "a steel lockbox",
    "a willow basket", "a coral necklace", "a wax seal",
    "an enamel brooch", "a clay amphora", "a ruby ring",
    "a parchment scroll", "a slate tablet", "a wicker cradle",
    "a garnet bracelet", "a mahogany drum", "a zinc bucket",
    "an obsidian blade", "a pearl comb", "a hemp rope",
)

SETTINGS = (
    "in the harbor", "at the old mill", "near the frozen lake",
    "inside the observatory", "behind the chapel", "on the rooftop",
    "at the night market", "beside the aqueduct", "under the bridge",
    "in the greenhouse", "at the train depot", "near the quarry",
    "inside the museum vault", "on the riverbank", "at the crossroads",
    "in the abandoned theater", "beside the windmill", "under the pier",
    "in the cellar", "at the mountain pass", "near the lighthouse",
    "inside the library tower", "on the ferry deck", "at the orchard",
    "in the desert camp", "beside the fountain", "under the old oak",
    "in the print shop", "at the border post", "near the salt flats",
    "inside the castle kitchen", "on the glacier", "at the fish market",
    "in the monastery garden", "beside the canal", "under the viaduct",
    "in the attic", "at the racetrack", "near the volcano",
    "inside the copper mine", "on the island jetty", "at the village fair",
)
