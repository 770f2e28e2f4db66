"""Bootstrap prompt templates with named substitution slots.

Placeholder syntax: ``{name}`` is a substitution slot only when ``name`` is
declared in the template's slot list; any other brace pair is literal text
(the benchmark-generation body deliberately shows ``{email}``-style
placeholders to the model).

The two judge templates have no published upstream wording; the defaults
below are editable stand-ins with documented slots, and a prompts file
(JSON map id -> body) can override any body without a rebuild.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

META_AGENT = "meta_agent"
CATEGORY_AGENT = "category_agent"
TOOL_AGENT = "tool_agent"
SOLVER = "solver"
REFLECT_TOOL = "reflect_tool"
REFLECT_CATEGORY = "reflect_category"
REFLECT_META = "reflect_meta"
BENCHMARK_GEN = "benchmark_gen"
JUDGE_SOLVED = "judge_solved"
JUDGE_SOLVABLE = "judge_solvable"


class UnknownTemplateError(KeyError):
    pass


class MissingSlotError(ValueError):
    def __init__(self, template_id: str, slot: str):
        self.slot = slot
        super().__init__(f"missing slot: {slot} (template {template_id})")


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    body: str
    slots: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for slot in self.slots:
            if "{" + slot + "}" not in self.body:
                raise ValueError(
                    f"template {self.id!r} declares slot {slot!r} missing from body"
                )


_META_AGENT_BODY = (
    "You are APIGPT, with access to a database of APIs. This database is organized "
    "into the following categories: {categories}. Your task is to help users identify "
    "the relevant categories for their needs. To do this, you can use the "
    "'query_tools_in_category' function to retrieve the available tools within a "
    "specific category. If you are unsure about the functionality of some tools, the "
    "'get_tools_descriptions' function can be used to obtain detailed information "
    "about these tools. This information will aid you in understanding the general "
    "functionality of each category. Additionally, the 'create_agent_category_level' "
    "function allows you to assign a relevant category to an agent, with each agent "
    "being assigned only one category. However, you can assign multiple categories to "
    "different agents. It is important to explore as many categories as possible, as "
    "the solution to a query may be found in unexpected categories. Remember, your "
    "goal is not to answer the query directly but to identify all potentially "
    "relevant categories and assign them to agents. Once you have completed the "
    "assignment, call the 'Finish' function. At each step, you should briefly analyze "
    "the current status and determine your next action, including the function calls "
    "needed to execute your step. Keep your analysis concise, ideally no longer than "
    "three sentences."
)

_CATEGORY_AGENT_BODY = (
    "You are APIGPT, with access to a database of APIs categorized into various "
    "groups. Each category contains numerous tools, and each tool encompasses "
    "multiple APIs. Your task is to assist users in finding relevant tools within a "
    "specific category. If uncertain about the functionality of some tools, use the "
    "'get_tools_descriptions' function to obtain detailed information. Then, employ "
    "the 'create_agent_tool_level' function to allocate a subset of pertinent tools "
    "to an agent, ensuring that similar tools are assigned to the same agent and "
    "limiting the allocation to no more than five tools per agent. You may assign "
    "different subsets to multiple agents. Remember, your role is not to answer "
    "queries directly, but to assign all possible tools. Once you complete the "
    "assignment, or if you determine the query is irrelevant to the tools in the "
    "specified category, invoke the 'Finish' function. Execute each step by calling "
    "the appropriate functions, and keep your thought process concise, ideally within "
    "three sentences."
)

_TOOL_AGENT_BODY = (
    "You are APIGPT with access to a database of APIs, categorized into various "
    "sections. Each category contains multiple tools, and each tool encompasses "
    "numerous APIs. Your task is to assist users in finding relevant APIs within the "
    "tools '{tools}' of the '{category}' category. You will be provided with "
    "descriptions and details of these tools and their APIs. Upon identifying "
    "relevant API names, use the 'add_apis_into_api_pool' function to add them to the "
    "final API list. If you conclude that all possible APIs have been explored, or if "
    "there are no relevant APIs in these tools, invoke the Finish function. During "
    "the process, you may receive feedback on these APIs. At each step, ensure to "
    "execute your actions using the appropriate functions. Keep your responses "
    "concise, ideally within three sentences."
)

_SOLVER_BODY = (
    "You are AutoGPT, you can use many tools (functions) to do the following task. "
    "First I will give you the task description, and your task start. At each step, "
    "you need to give your thought to analyze the status now and what to do next, "
    "with a function call to actually excute your step. After the call, you will get "
    "the call result, and you are now in a new state. Then you will analyze your "
    "status now, then decide what to do next... After many (Thought-call) pairs, you "
    "finally perform the task, then you can give your finial answer. If you feel you "
    "cannot solve the task or can only solve it partially, you should choose to give "
    "up and give your reason which should mention the names of the failed functions. "
    'Remember: 1.the state change is irreversible, you can\'t go back to one of the '
    'former state, if you want to restart the task, say "I give up and restart" and '
    "give the reason. 2.All the thought is short, at most in 5 sentence. 3.You can do "
    "more then one try, so if your plan is to continuously try some conditions, you "
    "can do one of the conditions per try. Let's Begin! Task description: "
    "{task_description}"
)

_REFLECT_TOOL_BODY = (
    "The current APIs have failed to solve the query, resulting in: {fail_reason}. "
    "You need to analyze this result and seek additional APIs. It's possible that "
    "the tools lack the relevant APIs. In such cases, you should call the Finish "
    "function. Remember not to invent tool or API names."
)

_REFLECT_CATEGORY_BODY = (
    "The current APIs have failed to solve the query, and the reason is: "
    "{fail_reason}. Please consider assigning more unexplored tools to the agents."
)

_REFLECT_META_BODY = (
    "The current APIs have failed to solve the query, and the reason is: "
    "{fail_reason}. Please consider assigning more unexplored categories to the "
    "agents."
)

_BENCHMARK_GEN_BODY = """Your task is to interact with a sophisticated database of tools and functions, often referred to as APIs, to construct a user query that will be answered using the capabilities of these APIs. This database is organized into various categories, indicated by {categories}. To guide your exploration and selection of the appropriate APIs, the database offers several meta functions:
Exploration Functions:
1. Use get_tools_in_category to explore tools in a specific category.
2. Employ get_apis_in_tool to discover the list of APIs available within a selected tool.
3. If you need detailed information about a tool, get_tool_descriptions will provide it.
4. For in-depth understanding of an API's functionality, turn to get_api_details.
Selection and Testing Functions:
1. As you identify relevant functions, add them to your working list using add_apis_into_api_pool.
2. Test these functions by synthesizing and applying various parameters. This step is crucial to understand how these functions can be practically applied in formulating your query.
3. Should you find any function obsolete or not fitting your query context, remove them using remove_apis_from_api_pool.
Query Formulation Guidelines:
1.Your formulated query should be comprehensive, integrating APIs from 2 to 5 different categories. This cross-functional approach is essential to demonstrate the versatility and broad applicability of the database.
2.Avoid using ambiguous terms. Instead, provide detailed, specific information. For instance, if your query involves personal contact details, use provided placeholders like {email} for email, {phone number} for phone number, and URLs like {url} for a company website.
3.The query should be relatable and understandable to users without requiring knowledge of the specific tools or API names used in the background. It should reflect a real-world user scenario.
4. Aim for a query length of at least thirty words to ensure depth and complexity.
Final Steps:
1.Once you've crafted the query, use the Finish function to submit it along with the corresponding answer. The answer should be direct and concise, addressing the query without delving into the operational plan of the APIs.
2.Remember, the total number of calls to the initial meta functions should not exceed 20.
3.Consider various use cases while formulating your query, such as data analysis in business contexts or educational content in academic settings. Your approach should be creative and inclusive, catering to users with different skill levels and cultural backgrounds. Ensure that the query is globally relevant and straightforward, serving a singular purpose without diverging into unrelated areas. The complexity of your query should stem from the synthesis of information from multiple APIs."""

_JUDGE_SOLVABLE_BODY = (
    "You are judging whether a user query could be answered using a set of candidate "
    "APIs.\nQuery: {query}\nCandidate APIs:\n{api_list}\nAnswer on the first line "
    "with exactly one word, 'solvable' or 'non-solvable', then explain briefly."
)

_JUDGE_SOLVED_BODY = (
    "You are judging whether a proposed solution actually resolves the user query."
    "\nQuery: {query}\nProposed solution: {solution}\nAnswer on the first line with "
    "exactly one word, 'solved' or 'unsolved', then explain briefly."
)

DEFAULT_TEMPLATES: dict[str, PromptTemplate] = {
    t.id: t
    for t in (
        PromptTemplate(META_AGENT, _META_AGENT_BODY, ("categories",)),
        PromptTemplate(CATEGORY_AGENT, _CATEGORY_AGENT_BODY, ()),
        PromptTemplate(TOOL_AGENT, _TOOL_AGENT_BODY, ("tools", "category")),
        PromptTemplate(SOLVER, _SOLVER_BODY, ("task_description",)),
        PromptTemplate(REFLECT_TOOL, _REFLECT_TOOL_BODY, ("fail_reason",)),
        PromptTemplate(REFLECT_CATEGORY, _REFLECT_CATEGORY_BODY, ("fail_reason",)),
        PromptTemplate(REFLECT_META, _REFLECT_META_BODY, ("fail_reason",)),
        PromptTemplate(BENCHMARK_GEN, _BENCHMARK_GEN_BODY, ("categories",)),
        PromptTemplate(JUDGE_SOLVABLE, _JUDGE_SOLVABLE_BODY, ("query", "api_list")),
        PromptTemplate(JUDGE_SOLVED, _JUDGE_SOLVED_BODY, ("query", "solution")),
    )
}


class PromptLibrary:
    """Template store: built-in defaults, optionally overridden from a file."""

    def __init__(self, overrides: dict[str, str] | None = None):
        self._templates = dict(DEFAULT_TEMPLATES)
        for id, body in (overrides or {}).items():
            if id not in self._templates:
                raise UnknownTemplateError(f"unknown template id: {id}")
            base = self._templates[id]
            self._templates[id] = PromptTemplate(id, body, base.slots)

    @classmethod
    def from_file(cls, path: str) -> "PromptLibrary":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError("prompts file must be a JSON object of id -> body")
        return cls({str(k): str(v) for k, v in doc.items()})

    def get(self, id: str) -> PromptTemplate:
        try:
            return self._templates[id]
        except KeyError:
            raise UnknownTemplateError(f"unknown template id: {id}") from None

    def render(self, id: str, bindings: dict[str, str] | None = None) -> str:
        """Substitute every declared slot exactly once per occurrence.

        Single pass, so slot-like text inside a binding is never
        re-substituted.
        """
        template = self.get(id)
        bindings = bindings or {}
        for slot in template.slots:
            if slot not in bindings:
                raise MissingSlotError(id, slot)
        if not template.slots:
            return template.body
        pattern = re.compile(
            "|".join(re.escape("{" + slot + "}") for slot in template.slots)
        )
        return pattern.sub(
            lambda m: str(bindings[m.group(0)[1:-1]]), template.body
        )


_DEFAULT_LIBRARY = PromptLibrary()


def render(id: str, bindings: dict[str, str] | None = None) -> str:
    """Render against the built-in default templates."""
    return _DEFAULT_LIBRARY.render(id, bindings)
